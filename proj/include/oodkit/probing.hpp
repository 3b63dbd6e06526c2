#pragma once

#include <cstdint>
#include <filesystem>
#include <utility>
#include <vector>

#include "oodkit/detection_scores.hpp"
#include "oodkit/embedding_store.hpp"

namespace oodkit {

/// Linear classifier logits = W·x + b, W stored row-major C×D.
struct LinearHead {
    std::size_t n_classes = 0;
    std::size_t feature_dim = 0;
    std::vector<double> weights;
    std::vector<double> bias;

    static LinearHead zeros(std::size_t n_classes, std::size_t feature_dim);

    void logits(std::span<const float> x, std::span<double> out) const;
    /// Logits for every row, as a C-column matrix.
    FeatureMatrix logits(const FeatureMatrix& features) const;
    void validate() const;
};

struct ProbeConfig {
    std::size_t steps = 20000;
    std::size_t batch_size = 256;
    double weight_decay = 1e-2;
    double lr_start = 1e-3;
    double lr_end = 1e-6;
    std::uint64_t seed = 0;

    void validate() const;
};

struct PseudoLabelSet {
    std::vector<std::size_t> kept_indices;
    std::vector<std::uint32_t> pseudo_labels;  // parallel to kept_indices
    std::vector<double> confidences;           // max softmax of each kept sample
    double confidence_threshold = 0.9;
    std::uint32_t n_classes = 0;
};

/// Cosine decay from lr_start at step 0 to lr_end at step steps−1.
double cosine_lr(std::size_t step, const ProbeConfig& config);

/// Mean cross-entropy over the rows in `batch`; fills the gradients w.r.t.
/// weights (C×D) and bias (C) when the output spans are non-empty.
double cross_entropy(const LinearHead& head, const FeatureMatrix& features,
                     const LabelVector& labels, std::span<const std::size_t> batch,
                     std::span<double> grad_weights = {}, std::span<double> grad_bias = {});

/// Trains a zero-initialized head with AdamW (bias not decayed) on shuffled
/// mini-batches. Optionally records the per-step batch loss.
LinearHead train_probe(const FeatureMatrix& features, const LabelVector& labels,
                       const ProbeConfig& config, std::vector<double>* loss_trace = nullptr);

std::vector<std::uint32_t> predict(const LinearHead& head, const FeatureMatrix& features);
double probe_accuracy(const LinearHead& head, const FeatureMatrix& features, const LabelVector& labels);

/// Argmax-softmax labels; a sample is kept when its max probability ≥ threshold.
PseudoLabelSet pseudo_label_filter(const FeatureMatrix& zero_shot_logits, double threshold = 0.9);

/// p indices per class, drawn without replacement; grouped by class, ascending within a class.
std::vector<std::size_t> few_shot_select(const LabelVector& labels, std::size_t p, std::uint64_t seed);

/// In-test and out-test scores from the head's logits. For rmd-logits the
/// Gaussians are fitted on the logits of the training set.
std::pair<ScoreVector, ScoreVector> evaluate_probe(const LinearHead& head, const FeatureMatrix& in_test,
                                                   const FeatureMatrix& out_test, ScoreKind kind,
                                                   const FeatureMatrix& train_features,
                                                   const LabelVector& train_labels);

struct FewShotOutcome {
    std::vector<double> aurocs;
    double mean_auroc = 0.0;
};

/// Repeats few-shot selection + training + MSP evaluation with seeds
/// config.seed + r for r in [0, runs) and averages the AUROC.
FewShotOutcome few_shot_evaluate(const FeatureMatrix& train, const LabelVector& labels,
                                 const FeatureMatrix& in_test, const FeatureMatrix& out_test,
                                 std::size_t p, const ProbeConfig& config, std::size_t runs = 5);

void write_head(const LinearHead& head, const DatasetManifest& manifest, const std::filesystem::path& path);
LinearHead read_head(const std::filesystem::path& path, DatasetManifest* manifest = nullptr);

}  // namespace oodkit

#include "oodkit/probing.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>

#include "oodkit/metrics.hpp"
#include "oodkit/optim.hpp"

namespace oodkit {

LinearHead LinearHead::zeros(std::size_t n_classes, std::size_t feature_dim) {
    LinearHead h;
    h.n_classes = n_classes;
    h.feature_dim = feature_dim;
    h.weights.assign(n_classes * feature_dim, 0.0);
    h.bias.assign(n_classes, 0.0);
    return h;
}

void LinearHead::validate() const {
    require(n_classes >= 1 && feature_dim >= 1, ErrorCode::InvariantViolation,
            "invariant violation: empty linear head");
    require(weights.size() == n_classes * feature_dim && bias.size() == n_classes,
            ErrorCode::InvariantViolation, "invariant violation: head parameter sizes");
    for (double w : weights) require(std::isfinite(w), ErrorCode::InvariantViolation, "non-finite head weight");
    for (double b : bias) require(std::isfinite(b), ErrorCode::InvariantViolation, "non-finite head bias");
}

void LinearHead::logits(std::span<const float> x, std::span<double> out) const {
    for (std::size_t c = 0; c < n_classes; ++c) {
        const double* w = weights.data() + c * feature_dim;
        double acc = bias[c];
        for (std::size_t j = 0; j < feature_dim; ++j) acc += w[j] * double(x[j]);
        out[c] = acc;
    }
}

FeatureMatrix LinearHead::logits(const FeatureMatrix& features) const {
    require(features.dim() == feature_dim, ErrorCode::DimensionMismatch,
            "dimension mismatch: head expects " + std::to_string(feature_dim) + " features, got " +
                std::to_string(features.dim()));
    const auto n = static_cast<std::ptrdiff_t>(features.n_samples());
    std::vector<float> out(features.n_samples() * n_classes);
#pragma omp parallel
    {
        std::vector<double> row(n_classes);
#pragma omp for schedule(static)
        for (std::ptrdiff_t i = 0; i < n; ++i) {
            logits(features.row(std::size_t(i)), row);
            for (std::size_t c = 0; c < n_classes; ++c) out[std::size_t(i) * n_classes + c] = float(row[c]);
        }
    }
    return FeatureMatrix(features.n_samples(), n_classes, std::move(out));
}

void ProbeConfig::validate() const {
    require(steps >= 1, ErrorCode::ContractViolation, "steps must be >= 1");
    require(batch_size >= 1, ErrorCode::ContractViolation, "batch_size must be >= 1");
    require(lr_end > 0.0 && lr_end <= lr_start, ErrorCode::ContractViolation,
            "learning rates must satisfy 0 < lr_end <= lr_start");
    require(weight_decay >= 0.0, ErrorCode::ContractViolation, "weight decay must be >= 0");
}

double cosine_lr(std::size_t step, const ProbeConfig& config) {
    require(step < config.steps, ErrorCode::ContractViolation,
            "step " + std::to_string(step) + " out of range [0, " + std::to_string(config.steps) + ")");
    if (config.steps == 1) return config.lr_start;
    const double t = double(step) / double(config.steps - 1);
    return config.lr_end +
           0.5 * (config.lr_start - config.lr_end) * (1.0 + std::cos(std::numbers::pi * t));
}

double cross_entropy(const LinearHead& head, const FeatureMatrix& features, const LabelVector& labels,
                     std::span<const std::size_t> batch, std::span<double> grad_weights,
                     std::span<double> grad_bias) {
    const std::size_t c_count = head.n_classes;
    const std::size_t d = head.feature_dim;
    const std::size_t b = batch.size();
    require(b >= 1, ErrorCode::ContractViolation, "empty batch");
    const bool want_grad = !grad_weights.empty();
    if (want_grad) {
        require(grad_weights.size() == c_count * d && grad_bias.size() == c_count,
                ErrorCode::DimensionMismatch, "gradient buffer sizes");
    }

    // Per-sample softmax residuals (p − onehot), row-parallel.
    std::vector<double> resid(b * c_count);
    std::vector<double> sample_loss(b);
    const auto bi = static_cast<std::ptrdiff_t>(b);
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t s = 0; s < bi; ++s) {
        const std::size_t i = batch[std::size_t(s)];
        std::span<double> z(resid.data() + std::size_t(s) * c_count, c_count);
        head.logits(features.row(i), z);
        const double mx = *std::max_element(z.begin(), z.end());
        double sum = 0.0;
        for (double v : z) sum += std::exp(v - mx);
        const double lse = mx + std::log(sum);
        const std::uint32_t y = labels.labels[i];
        sample_loss[std::size_t(s)] = lse - z[y];
        for (std::size_t c = 0; c < c_count; ++c) z[c] = std::exp(z[c] - lse) - (c == y ? 1.0 : 0.0);
    }
    double loss = 0.0;
    for (double l : sample_loss) loss += l;
    loss /= double(b);

    if (want_grad) {
        const double inv_b = 1.0 / double(b);
        const auto ci = static_cast<std::ptrdiff_t>(c_count);
#pragma omp parallel for schedule(static)
        for (std::ptrdiff_t cc = 0; cc < ci; ++cc) {
            const auto c = std::size_t(cc);
            double* gw = grad_weights.data() + c * d;
            std::fill(gw, gw + d, 0.0);
            double gb = 0.0;
            for (std::size_t s = 0; s < b; ++s) {
                const double r = resid[s * c_count + c];
                const auto x = features.row(batch[s]);
                for (std::size_t j = 0; j < d; ++j) gw[j] += r * double(x[j]);
                gb += r;
            }
            for (std::size_t j = 0; j < d; ++j) gw[j] *= inv_b;
            grad_bias[c] = gb * inv_b;
        }
    }
    return loss;
}

LinearHead train_probe(const FeatureMatrix& features, const LabelVector& labels,
                       const ProbeConfig& config, std::vector<double>* loss_trace) {
    config.validate();
    require(labels.size() == features.n_samples(), ErrorCode::DimensionMismatch,
            "label count does not match feature rows");
    require(labels.n_classes >= 2, ErrorCode::ContractViolation, "at least 2 classes required");
    labels.require_all_classes_present();

    const std::size_t n = features.n_samples();
    const std::size_t batch_size = std::min(config.batch_size, n);
    LinearHead head = LinearHead::zeros(labels.n_classes, features.dim());
    AdamW opt_w(head.weights.size(), config.weight_decay);
    AdamW opt_b(head.bias.size(), 0.0);
    std::vector<double> grad_w(head.weights.size());
    std::vector<double> grad_b(head.bias.size());

    std::mt19937_64 rng(config.seed);
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::shuffle(perm.begin(), perm.end(), rng);
    std::size_t cursor = 0;
    std::vector<std::size_t> batch(batch_size);

    if (loss_trace) {
        loss_trace->clear();
        loss_trace->reserve(config.steps);
    }
    for (std::size_t step = 0; step < config.steps; ++step) {
        for (auto& idx : batch) {
            if (cursor == n) {
                std::shuffle(perm.begin(), perm.end(), rng);
                cursor = 0;
            }
            idx = perm[cursor++];
        }
        const double loss = cross_entropy(head, features, labels, batch, grad_w, grad_b);
        require(std::isfinite(loss), ErrorCode::NonFiniteLoss,
                "non-finite loss at step " + std::to_string(step));
        if (loss_trace) loss_trace->push_back(loss);
        const double lr = cosine_lr(step, config);
        opt_w.step(head.weights, grad_w, lr);
        opt_b.step(head.bias, grad_b, lr);
    }
    return head;
}

std::vector<std::uint32_t> predict(const LinearHead& head, const FeatureMatrix& features) {
    const auto logits = head.logits(features);
    std::vector<std::uint32_t> out(features.n_samples());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const auto row = logits.row(i);
        out[i] = static_cast<std::uint32_t>(std::max_element(row.begin(), row.end()) - row.begin());
    }
    return out;
}

double probe_accuracy(const LinearHead& head, const FeatureMatrix& features, const LabelVector& labels) {
    return knn_accuracy(predict(head, features), labels);
}

PseudoLabelSet pseudo_label_filter(const FeatureMatrix& zero_shot_logits, double threshold) {
    PseudoLabelSet out;
    out.confidence_threshold = threshold;
    out.n_classes = static_cast<std::uint32_t>(zero_shot_logits.dim());
    for (std::size_t i = 0; i < zero_shot_logits.n_samples(); ++i) {
        const auto p = softmax(zero_shot_logits.row(i));
        const auto best = std::max_element(p.begin(), p.end());
        if (*best >= threshold) {
            out.kept_indices.push_back(i);
            out.pseudo_labels.push_back(static_cast<std::uint32_t>(best - p.begin()));
            out.confidences.push_back(*best);
        }
    }
    return out;
}

std::vector<std::size_t> few_shot_select(const LabelVector& labels, std::size_t p, std::uint64_t seed) {
    require(p >= 1, ErrorCode::ContractViolation, "p must be >= 1");
    const auto counts = labels.class_counts();
    std::vector<std::vector<std::size_t>> by_class(labels.n_classes);
    for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels.labels[i]].push_back(i);
    for (std::size_t c = 0; c < counts.size(); ++c) {
        require(counts[c] >= p, ErrorCode::ContractViolation,
                "class " + std::to_string(c) + " has " + std::to_string(counts[c]) +
                    " samples, fewer than p=" + std::to_string(p));
    }
    std::mt19937_64 rng(seed);
    std::vector<std::size_t> out;
    out.reserve(p * labels.n_classes);
    for (auto& members : by_class) {
        std::shuffle(members.begin(), members.end(), rng);
        std::sort(members.begin(), members.begin() + static_cast<std::ptrdiff_t>(p));
        out.insert(out.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(p));
    }
    return out;
}

std::pair<ScoreVector, ScoreVector> evaluate_probe(const LinearHead& head, const FeatureMatrix& in_test,
                                                   const FeatureMatrix& out_test, ScoreKind kind,
                                                   const FeatureMatrix& train_features,
                                                   const LabelVector& train_labels) {
    const auto in_logits = head.logits(in_test);
    const auto out_logits = head.logits(out_test);
    if (kind == ScoreKind::Msp) return {msp_score(in_logits), msp_score(out_logits)};
    require(kind == ScoreKind::RmdLogits, ErrorCode::ContractViolation,
            std::string("probe evaluation supports msp or rmd-logits, not ") + to_string(kind));
    const auto stats = fit_gaussian_stats(head.logits(train_features), train_labels);
    auto in_s = rmd_score(stats, in_logits);
    auto out_s = rmd_score(stats, out_logits);
    in_s.kind = out_s.kind = ScoreKind::RmdLogits;
    return {std::move(in_s), std::move(out_s)};
}

FewShotOutcome few_shot_evaluate(const FeatureMatrix& train, const LabelVector& labels,
                                 const FeatureMatrix& in_test, const FeatureMatrix& out_test,
                                 std::size_t p, const ProbeConfig& config, std::size_t runs) {
    require(runs >= 1, ErrorCode::ContractViolation, "runs must be >= 1");
    FewShotOutcome outcome;
    for (std::size_t r = 0; r < runs; ++r) {
        ProbeConfig cfg = config;
        cfg.seed = config.seed + r;
        const auto idx = few_shot_select(labels, p, cfg.seed);
        const auto head = train_probe(train.select_rows(idx), labels.select(idx), cfg);
        const auto [in_s, out_s] = evaluate_probe(head, in_test, out_test, ScoreKind::Msp, train, labels);
        outcome.aurocs.push_back(auroc(in_s.scores, out_s.scores));
    }
    outcome.mean_auroc = std::accumulate(outcome.aurocs.begin(), outcome.aurocs.end(), 0.0) /
                         double(outcome.aurocs.size());
    return outcome;
}

void write_head(const LinearHead& head, const DatasetManifest& manifest, const std::filesystem::path& path) {
    head.validate();
    container::Raw raw;
    raw.header.rows = head.n_classes;
    raw.header.cols = head.feature_dim;
    raw.header.kind = container::Kind::LinearHead;
    raw.values.assign(head.weights.begin(), head.weights.end());
    raw.bias.assign(head.bias.begin(), head.bias.end());
    raw.manifest = manifest;
    raw.manifest.role = DatasetRole::LinearHead;
    container::write_raw(raw, path);
}

LinearHead read_head(const std::filesystem::path& path, DatasetManifest* manifest) {
    auto raw = container::read_raw(path);
    require(raw.header.kind == container::Kind::LinearHead, ErrorCode::MalformedContainer,
            path.string() + " is not a linear-head container");
    LinearHead head;
    head.n_classes = raw.header.rows;
    head.feature_dim = raw.header.cols;
    head.weights.assign(raw.values.begin(), raw.values.end());
    head.bias.assign(raw.bias.begin(), raw.bias.end());
    head.validate();
    if (manifest) *manifest = std::move(raw.manifest);
    return head;
}

}  // namespace oodkit

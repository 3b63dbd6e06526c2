#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "oodkit/embedding_store.hpp"
#include "oodkit/kernels.hpp"

namespace oodkit {

struct SimilarityGradient {
    double similarity = 0.0;
    /// d(−cos(g(x), target)) / dx, CHW like the image.
    std::vector<double> gradient;
};

/// A differentiable image encoder g(·).
class Encoder {
public:
    virtual ~Encoder() = default;

    virtual std::vector<double> encode(const ImageShape& shape, std::span<const double> pixels) = 0;
    virtual SimilarityGradient grad_similarity(const ImageShape& shape, std::span<const double> pixels,
                                               std::span<const double> target) = 0;
    /// True when concurrent calls from several threads are allowed.
    virtual bool thread_safe() const { return false; }
};

/// Desk-scale stand-in for a pretrained backbone:
///   g(x) = mix · tanh(projection · x)
/// with projection D×(3HW) ~ N(0, gain²/(3HW)) and mix D×D ~ N(0, 1/D), both
/// drawn from a seeded generator. Architecture and draws are frozen at kVersion.
class ToyEncoder final : public Encoder {
public:
    static constexpr int kVersion = 1;
    static constexpr double kGain = 2.0;

    ToyEncoder(ImageShape shape, std::size_t feature_dim, std::uint64_t seed);

    const ImageShape& shape() const noexcept { return shape_; }
    std::size_t feature_dim() const noexcept { return static_cast<std::size_t>(mix_.rows()); }

    std::vector<double> encode(const ImageShape& shape, std::span<const double> pixels) override;
    SimilarityGradient grad_similarity(const ImageShape& shape, std::span<const double> pixels,
                                       std::span<const double> target) override;
    bool thread_safe() const override { return true; }

    std::vector<double> encode(const ImageTensor& image);

private:
    void check_shape(const ImageShape& shape, std::span<const double> pixels) const;

    ImageShape shape_;
    kernels::RowMatrixXd projection_;
    kernels::RowMatrixXd mix_;
};

double cosine_similarity(std::span<const double> a, std::span<const double> b);

/// (1/(3HW)) Σ (Δ_h ρ)² + (Δ_w ρ)² with forward differences along each axis;
/// the difference at the last row (resp. column) is zero.
double smoothness_loss(const ImageShape& shape, std::span<const double> rho);
std::vector<double> smoothness_grad(const ImageShape& shape, std::span<const double> rho);

struct AttackConfig {
    static constexpr double kSmoothLambda = 5e3;

    std::size_t steps = 250;
    double lr = 1e-3;
    double lambda_smooth = 0.0;
    /// Standard deviation of the initial perturbation (variance 1e-3).
    double init_sigma = std::sqrt(1e-3);
    std::uint64_t seed = 0;

    void validate() const;
};

struct AttackResult {
    ImageTensor perturbed_image;
    /// Similarity of the clean image to the target.
    double initial_similarity = 0.0;
    double final_similarity = 0.0;
    /// −sim + λ·smooth evaluated at the start of every step.
    std::vector<double> loss_trace;
    double smooth_loss_final = 0.0;
    bool success = false;
};

/// Called after every update with the clipped image x' + ρ.
using StepObserver = std::function<void(std::size_t step, std::span<const double> image)>;

/// Minimizes −sim(target, g(x' + ρ)) + λ·smooth(ρ) with Adam, clipping x' + ρ
/// to [0,1] after every step. If x' already matches the target the image is
/// returned unchanged.
AttackResult attack(const ImageTensor& x_out, std::span<const double> target_feature, Encoder& encoder,
                    const AttackConfig& config, const StepObserver& observer = {});

struct AdversarialDataset {
    std::vector<AttackResult> results;
    /// Index into the in-distribution list of the target chosen for each OOD image.
    std::vector<std::size_t> target_indices;
};

/// One seeded-random in-distribution target per OOD image; image i is attacked
/// with seed config.seed ^ i. Runs in parallel when the encoder is thread-safe.
AdversarialDataset build_adversarial_dataset(std::span<const ImageTensor> out_images,
                                             std::span<const ImageTensor> in_images, Encoder& encoder,
                                             const AttackConfig& config, std::uint64_t seed);

/// Indices in [0, n) that are not attack targets, ascending.
std::vector<std::size_t> exclude_targets(std::size_t n, std::span<const std::size_t> targets);

}  // namespace oodkit

#include "oodkit/adversarial.hpp"

#include <algorithm>
#include <exception>
#include <random>

#include "oodkit/optim.hpp"

namespace oodkit {

// ---------------------------------------------------------------------------
// ToyEncoder

ToyEncoder::ToyEncoder(ImageShape shape, std::size_t feature_dim, std::uint64_t seed) : shape_(shape) {
    require(shape.channels == 3 && shape.height >= 2 && shape.width >= 2, ErrorCode::ContractViolation,
            "toy encoder needs a 3xHxW shape with H,W >= 2");
    require(feature_dim >= 1, ErrorCode::ContractViolation, "feature_dim must be >= 1");
    const auto d = static_cast<Eigen::Index>(feature_dim);
    const auto p = static_cast<Eigen::Index>(shape.size());
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    projection_.resize(d, p);
    mix_.resize(d, d);
    const double proj_scale = kGain / std::sqrt(double(p));
    const double mix_scale = 1.0 / std::sqrt(double(d));
    for (Eigen::Index i = 0; i < projection_.size(); ++i) projection_.data()[i] = proj_scale * normal(rng);
    for (Eigen::Index i = 0; i < mix_.size(); ++i) mix_.data()[i] = mix_scale * normal(rng);
}

void ToyEncoder::check_shape(const ImageShape& shape, std::span<const double> pixels) const {
    require(shape == shape_ && pixels.size() == shape_.size(), ErrorCode::DimensionMismatch,
            "toy encoder built for 3x" + std::to_string(shape_.height) + "x" +
                std::to_string(shape_.width) + " images");
}

std::vector<double> ToyEncoder::encode(const ImageShape& shape, std::span<const double> pixels) {
    check_shape(shape, pixels);
    const Eigen::Map<const Eigen::VectorXd> x(pixels.data(), Eigen::Index(pixels.size()));
    const Eigen::VectorXd hidden = (projection_ * x).array().tanh().matrix();
    const Eigen::VectorXd f = mix_ * hidden;
    return {f.data(), f.data() + f.size()};
}

std::vector<double> ToyEncoder::encode(const ImageTensor& image) {
    const auto px = image.pixels_as_double();
    return encode(image.shape(), px);
}

SimilarityGradient ToyEncoder::grad_similarity(const ImageShape& shape, std::span<const double> pixels,
                                               std::span<const double> target) {
    check_shape(shape, pixels);
    require(target.size() == feature_dim(), ErrorCode::DimensionMismatch,
            "target feature has " + std::to_string(target.size()) + " values, encoder emits " +
                std::to_string(feature_dim()));
    const Eigen::Map<const Eigen::VectorXd> x(pixels.data(), Eigen::Index(pixels.size()));
    const Eigen::Map<const Eigen::VectorXd> t(target.data(), Eigen::Index(target.size()));
    const Eigen::VectorXd hidden = (projection_ * x).array().tanh().matrix();
    const Eigen::VectorXd f = mix_ * hidden;

    const double fn = f.norm();
    const double tn = t.norm();
    require(fn > 0.0 && tn > 0.0, ErrorCode::InvariantViolation, "zero-norm feature in similarity");
    const double cos = f.dot(t) / (fn * tn);
    // d cos / d f = t/(|f||t|) − cos · f/|f|²
    const Eigen::VectorXd dcos_df = t / (fn * tn) - cos * f / (fn * fn);
    const Eigen::VectorXd dh = mix_.transpose() * dcos_df;
    const Eigen::VectorXd du = dh.array() * (1.0 - hidden.array().square());
    const Eigen::VectorXd dx = -(projection_.transpose() * du);

    SimilarityGradient out;
    out.similarity = cos;
    out.gradient.assign(dx.data(), dx.data() + dx.size());
    return out;
}

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
    require(a.size() == b.size(), ErrorCode::DimensionMismatch, "cosine of vectors with different lengths");
    double ab = 0.0, aa = 0.0, bb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ab += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    require(aa > 0.0 && bb > 0.0, ErrorCode::InvariantViolation, "zero-norm feature in similarity");
    return ab / std::sqrt(aa * bb);
}

// ---------------------------------------------------------------------------
// Smoothness regularizer

namespace {

void check_rho(const ImageShape& shape, std::span<const double> rho) {
    require(shape.height >= 2 && shape.width >= 2, ErrorCode::ContractViolation,
            "smoothness needs H,W >= 2");
    require(rho.size() == shape.size(), ErrorCode::DimensionMismatch, "perturbation size does not match shape");
}

}  // namespace

double smoothness_loss(const ImageShape& shape, std::span<const double> rho) {
    check_rho(shape, rho);
    const std::size_t h = shape.height, w = shape.width;
    double sum = 0.0;
    for (std::size_t c = 0; c < shape.channels; ++c) {
        const double* p = rho.data() + c * h * w;
        for (std::size_t i = 0; i < h; ++i) {
            for (std::size_t j = 0; j < w; ++j) {
                const double v = p[i * w + j];
                if (i + 1 < h) sum += (p[(i + 1) * w + j] - v) * (p[(i + 1) * w + j] - v);
                if (j + 1 < w) sum += (p[i * w + j + 1] - v) * (p[i * w + j + 1] - v);
            }
        }
    }
    return sum / double(shape.size());
}

std::vector<double> smoothness_grad(const ImageShape& shape, std::span<const double> rho) {
    check_rho(shape, rho);
    const std::size_t h = shape.height, w = shape.width;
    const double scale = 2.0 / double(shape.size());
    std::vector<double> g(rho.size(), 0.0);
    for (std::size_t c = 0; c < shape.channels; ++c) {
        const double* p = rho.data() + c * h * w;
        double* q = g.data() + c * h * w;
        for (std::size_t i = 0; i < h; ++i) {
            for (std::size_t j = 0; j < w; ++j) {
                const std::size_t k = i * w + j;
                if (i + 1 < h) {
                    const double dv = scale * (p[k + w] - p[k]);
                    q[k] -= dv;
                    q[k + w] += dv;
                }
                if (j + 1 < w) {
                    const double dv = scale * (p[k + 1] - p[k]);
                    q[k] -= dv;
                    q[k + 1] += dv;
                }
            }
        }
    }
    return g;
}

// ---------------------------------------------------------------------------
// Attack

void AttackConfig::validate() const {
    require(steps >= 1, ErrorCode::ContractViolation, "attack steps must be >= 1");
    require(lr > 0.0, ErrorCode::ContractViolation, "attack lr must be > 0");
    require(lambda_smooth >= 0.0, ErrorCode::ContractViolation, "lambda must be >= 0");
    require(init_sigma >= 0.0, ErrorCode::ContractViolation, "init_sigma must be >= 0");
}

namespace {

// x' + ρ clipped to [0,1]; ρ is redefined as the clipped image minus x'.
void project(std::span<const double> x, std::vector<double>& rho, std::vector<double>& image) {
    for (std::size_t i = 0; i < x.size(); ++i) {
        image[i] = std::clamp(x[i] + rho[i], 0.0, 1.0);
        rho[i] = image[i] - x[i];
    }
}

ImageTensor to_image(const ImageShape& shape, const std::vector<double>& pixels) {
    std::vector<float> px(pixels.size());
    for (std::size_t i = 0; i < px.size(); ++i) px[i] = std::clamp(float(pixels[i]), 0.0f, 1.0f);
    return ImageTensor(shape.height, shape.width, std::move(px));
}

}  // namespace

AttackResult attack(const ImageTensor& x_out, std::span<const double> target_feature, Encoder& encoder,
                    const AttackConfig& config, const StepObserver& observer) {
    config.validate();
    const ImageShape& shape = x_out.shape();
    const std::vector<double> x = x_out.pixels_as_double();

    const auto clean = encoder.encode(shape, x);
    require(clean.size() == target_feature.size(), ErrorCode::DimensionMismatch,
            "encoder emits " + std::to_string(clean.size()) + " features, target has " +
                std::to_string(target_feature.size()));

    AttackResult result;
    result.initial_similarity = cosine_similarity(clean, target_feature);
    result.loss_trace.reserve(config.steps);

    constexpr double kMatched = 1.0 - 1e-12;
    if (result.initial_similarity >= kMatched) {
        result.perturbed_image = x_out;
        result.final_similarity = result.initial_similarity;
        result.loss_trace.assign(config.steps, -result.initial_similarity);
        result.smooth_loss_final = 0.0;
        result.success = true;
        return result;
    }

    std::mt19937_64 rng(config.seed);
    std::normal_distribution<double> noise(0.0, config.init_sigma);
    std::vector<double> rho(x.size());
    for (auto& r : rho) r = config.init_sigma > 0.0 ? noise(rng) : 0.0;
    std::vector<double> image(x.size());
    project(x, rho, image);

    AdamW adam(rho.size(), 0.0);
    std::vector<double> grad(rho.size());
    const double lambda = config.lambda_smooth;
    for (std::size_t step = 0; step < config.steps; ++step) {
        const auto sg = encoder.grad_similarity(shape, image, target_feature);
        require(sg.gradient.size() == rho.size(), ErrorCode::DimensionMismatch,
                "encoder gradient shape does not match the image");
        double loss = -sg.similarity;
        if (lambda > 0.0) {
            loss += lambda * smoothness_loss(shape, rho);
            const auto sgrad = smoothness_grad(shape, rho);
            for (std::size_t i = 0; i < grad.size(); ++i) grad[i] = sg.gradient[i] + lambda * sgrad[i];
        } else {
            grad = sg.gradient;
        }
        require(std::isfinite(loss), ErrorCode::NonFiniteLoss,
                "non-finite attack loss at step " + std::to_string(step));
        result.loss_trace.push_back(loss);

        adam.step(rho, grad, config.lr);
        project(x, rho, image);
        if (observer) observer(step, image);
    }

    result.perturbed_image = to_image(shape, image);
    const auto px = result.perturbed_image.pixels_as_double();
    std::vector<double> final_rho(px.size());
    for (std::size_t i = 0; i < px.size(); ++i) final_rho[i] = px[i] - x[i];
    result.final_similarity = cosine_similarity(encoder.encode(shape, px), target_feature);
    result.smooth_loss_final = smoothness_loss(shape, final_rho);
    result.success = result.final_similarity > result.initial_similarity;
    return result;
}

AdversarialDataset build_adversarial_dataset(std::span<const ImageTensor> out_images,
                                             std::span<const ImageTensor> in_images, Encoder& encoder,
                                             const AttackConfig& config, std::uint64_t seed) {
    require(!out_images.empty() && !in_images.empty(), ErrorCode::ContractViolation,
            "adversarial dataset needs non-empty OOD and in-distribution image lists");
    config.validate();

    AdversarialDataset ds;
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::size_t> pick(0, in_images.size() - 1);
    ds.target_indices.resize(out_images.size());
    for (auto& t : ds.target_indices) t = pick(rng);
    ds.results.resize(out_images.size());

    const auto n = static_cast<std::ptrdiff_t>(out_images.size());
    std::exception_ptr error;
#pragma omp parallel for schedule(dynamic) if (encoder.thread_safe())
    for (std::ptrdiff_t ii = 0; ii < n; ++ii) {
        const auto i = std::size_t(ii);
        try {
            const auto& target_img = in_images[ds.target_indices[i]];
            const auto target = encoder.encode(target_img.shape(), target_img.pixels_as_double());
            AttackConfig cfg = config;
            cfg.seed = config.seed ^ std::uint64_t(i);
            ds.results[i] = attack(out_images[i], target, encoder, cfg);
        } catch (...) {
#pragma omp critical(oodkit_attack_error)
            if (!error) error = std::current_exception();
        }
    }
    if (error) std::rethrow_exception(error);
    return ds;
}

std::vector<std::size_t> exclude_targets(std::size_t n, std::span<const std::size_t> targets) {
    std::vector<bool> removed(n, false);
    for (auto t : targets) {
        require(t < n, ErrorCode::ContractViolation, "target index out of range");
        removed[t] = true;
    }
    std::vector<std::size_t> keep;
    for (std::size_t i = 0; i < n; ++i) {
        if (!removed[i]) keep.push_back(i);
    }
    return keep;
}

}  // namespace oodkit

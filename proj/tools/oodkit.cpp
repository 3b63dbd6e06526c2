#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "oodkit/adversarial.hpp"
#include "oodkit/bridge_client.hpp"
#include "oodkit/detection_scores.hpp"
#include "oodkit/embedding_store.hpp"
#include "oodkit/metrics.hpp"
#include "oodkit/probing.hpp"

using namespace oodkit;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitOther = 1;
constexpr int kExitContract = 2;
constexpr int kExitMismatch = 3;
constexpr int kExitBridge = 4;

int exit_code_for(ErrorCode code) {
    switch (code) {
        case ErrorCode::ContractViolation: return kExitContract;
        case ErrorCode::DimensionMismatch: return kExitMismatch;
        case ErrorCode::BridgeFailure: return kExitBridge;
        default: return kExitOther;
    }
}

class Stopwatch {
public:
    double elapsed_ms() const {
        return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start_).count();
    }

private:
    std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

EmbeddingFile load(const std::string& path, bool normalize) {
    auto f = read_embeddings(path);
    if (normalize) f.matrix = f.matrix.l2_normalized();
    return f;
}

const LabelVector& labels_of(const EmbeddingFile& f, const std::string& flag, const std::string& why) {
    require(f.labels.has_value(), ErrorCode::ContractViolation,
            why + " requires labels in " + flag + " (" + f.manifest.name + ")");
    return *f.labels;
}

std::vector<std::size_t> read_targets(const std::string& path) {
    std::ifstream in(path);
    require(bool(in), ErrorCode::Io, "cannot open " + path);
    try {
        return json::parse(in).at("target_indices").get<std::vector<std::size_t>>();
    } catch (const json::exception& e) {
        fail(ErrorCode::MalformedContainer, path + ": " + e.what());
    }
}

void write_json(const json& j, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    require(bool(out), ErrorCode::Io, "cannot write " + path);
    out << j.dump(2) << "\n";
}

void emit(const EvalReport& report, const std::string& json_path) {
    std::cout << report.to_text();
    if (!json_path.empty()) write_json(report.to_json(), json_path);
}

std::unique_ptr<Encoder> make_encoder(const std::string& spec, const ImageShape& shape, std::size_t feature_dim,
                                      std::uint64_t toy_seed) {
    if (spec == "toy") return std::make_unique<ToyEncoder>(shape, feature_dim, toy_seed);
    const std::string prefix = "bridge:";
    if (spec.rfind(prefix, 0) == 0) return std::make_unique<BridgeEncoder>(spec.substr(prefix.size()));
    fail(ErrorCode::ContractViolation, "unknown encoder '" + spec + "' (expected toy or bridge:<command>)");
}

std::string encoder_label(const std::string& spec, std::size_t feature_dim, std::uint64_t toy_seed) {
    if (spec == "toy") {
        return "toy-v" + std::to_string(ToyEncoder::kVersion) + "(d=" + std::to_string(feature_dim) +
               ",seed=" + std::to_string(toy_seed) + ")";
    }
    return spec;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
    std::string in_train, in_test, out_test, exclude, json_path;
    std::vector<std::string> scores = {"nn"};
    std::optional<double> epsilon;
    std::size_t kmeans_k = 5;
    bool normalize = false;
    std::uint64_t seed = 0;
};

std::pair<ScoreVector, ScoreVector> eval_scores(ScoreKind kind, const EvalArgs& a, const EmbeddingFile* train,
                                                const EmbeddingFile& in, const EmbeddingFile& out) {
    if (kind == ScoreKind::Msp) return {msp_score(in.matrix), msp_score(out.matrix)};
    require(kind != ScoreKind::RmdLogits, ErrorCode::ContractViolation,
            "rmd-logits scores a trained head; use `oodkit probe`");
    require(train != nullptr, ErrorCode::ContractViolation,
            std::string("score ") + to_string(kind) + " requires --in-train");
    if (kind == ScoreKind::Nn) return {nn_score(train->matrix, in.matrix), nn_score(train->matrix, out.matrix)};
    GaussianStats stats;
    if (kind == ScoreKind::KmeansMd) {
        const auto clusters = kmeans_fit(train->matrix, a.kmeans_k, kDefaultKmeansIters, a.seed);
        stats = fit_gaussian_stats(train->matrix, clusters.as_labels(), a.epsilon);
    } else {
        stats = fit_gaussian_stats(train->matrix, labels_of(*train, "--in-train", std::string("score ") + to_string(kind)),
                                   a.epsilon);
    }
    auto si = kind == ScoreKind::Rmd ? rmd_score(stats, in.matrix) : md_score(stats, in.matrix);
    auto so = kind == ScoreKind::Rmd ? rmd_score(stats, out.matrix) : md_score(stats, out.matrix);
    si.kind = so.kind = kind;
    return {std::move(si), std::move(so)};
}

int cmd_eval(const EvalArgs& a) {
    const auto in = load(a.in_test, a.normalize);
    const auto out = load(a.out_test, a.normalize);
    std::optional<EmbeddingFile> train;
    if (!a.in_train.empty()) {
        train = load(a.in_train, a.normalize);
        if (!a.exclude.empty()) {
            const auto keep = exclude_targets(train->matrix.n_samples(), read_targets(a.exclude));
            require(!keep.empty(), ErrorCode::ContractViolation, "every reference sample is an attack target");
            train->matrix = train->matrix.select_rows(keep);
            if (train->labels) train->labels = train->labels->select(keep);
        }
    }
    const std::string in_name = train ? train->manifest.name : in.manifest.name;

    EvalReport report;
    for (const auto& name : a.scores) {
        const auto kind = parse_score_kind(name);
        Stopwatch clock;
        const auto [si, so] = eval_scores(kind, a, train ? &*train : nullptr, in, out);
        ReportRow row{in_name, out.manifest.name, name, auroc(si, so).auroc, 0.0, json::object()};
        if (train && !a.exclude.empty()) row.extra["reference_rows"] = train->matrix.n_samples();
        if (kind == ScoreKind::KmeansMd) row.extra["k"] = a.kmeans_k;
        row.runtime_ms = clock.elapsed_ms();
        report.rows.push_back(std::move(row));
    }
    emit(report, a.json_path);
    return kExitOk;
}

// ---------------------------------------------------------------------------

struct ProbeArgs {
    std::string in_train, in_test, out_test, pseudo_logits, head_out, json_path;
    std::string score = "msp";
    std::optional<std::size_t> few_shot_p;
    std::optional<std::size_t> steps;
    ProbeConfig cfg;
    double threshold = 0.9;
    bool normalize = false;
};

// Keeps only the kept rows and renumbers the surviving pseudo-classes 0..K-1.
LabelVector compact_labels(const PseudoLabelSet& set) {
    std::map<std::uint32_t, std::uint32_t> remap;
    for (auto l : set.pseudo_labels) remap.emplace(l, 0);
    std::uint32_t next = 0;
    for (auto& [from, to] : remap) to = next++;
    LabelVector out;
    out.n_classes = next;
    for (auto l : set.pseudo_labels) out.labels.push_back(remap.at(l));
    return out;
}

int cmd_probe(ProbeArgs a) {
    const auto kind = parse_score_kind(a.score);
    require(kind == ScoreKind::Msp || kind == ScoreKind::RmdLogits, ErrorCode::ContractViolation,
            "probe scores are msp or rmd-logits");
    require(!(a.few_shot_p && !a.pseudo_logits.empty()), ErrorCode::ContractViolation,
            "--few-shot-p and --pseudo-logits are mutually exclusive");
    a.cfg.steps = a.steps.value_or(a.few_shot_p ? 10000 : 20000);

    const auto train = load(a.in_train, a.normalize);
    const auto in = load(a.in_test, a.normalize);
    const auto out = load(a.out_test, a.normalize);

    Stopwatch clock;
    ReportRow row{train.manifest.name, out.manifest.name, a.score, 0.0, 0.0, json::object()};
    if (a.few_shot_p) {
        require(kind == ScoreKind::Msp, ErrorCode::ContractViolation, "few-shot probing is evaluated with msp only");
        require(a.head_out.empty(), ErrorCode::ContractViolation, "--head-out is not available for few-shot runs");
        const auto& labels = labels_of(train, "--in-train", "few-shot probing");
        const auto outcome = few_shot_evaluate(train.matrix, labels, in.matrix, out.matrix, *a.few_shot_p, a.cfg);
        row.auroc = outcome.mean_auroc;
        row.extra = {{"mode", "few-shot"}, {"p", *a.few_shot_p}, {"runs", outcome.aurocs.size()},
                     {"aurocs", outcome.aurocs}};
    } else {
        FeatureMatrix features = train.matrix;
        LabelVector labels;
        if (!a.pseudo_logits.empty()) {
            const auto logits = read_embeddings(a.pseudo_logits);
            require(logits.matrix.n_samples() == train.matrix.n_samples(), ErrorCode::DimensionMismatch,
                    "--pseudo-logits has " + std::to_string(logits.matrix.n_samples()) + " rows, --in-train has " +
                        std::to_string(train.matrix.n_samples()));
            const auto set = pseudo_label_filter(logits.matrix, a.threshold);
            require(!set.kept_indices.empty(), ErrorCode::ContractViolation,
                    "no sample reaches the pseudo-label threshold");
            labels = compact_labels(set);
            features = train.matrix.select_rows(set.kept_indices);
            row.extra = {{"mode", "pseudo-label"}, {"threshold", a.threshold}, {"kept", set.kept_indices.size()},
                         {"classes_kept", labels.n_classes}};
        } else {
            labels = labels_of(train, "--in-train", "probing");
            row.extra = {{"mode", "full"}};
        }
        const auto head = train_probe(features, labels, a.cfg);
        row.extra["train_accuracy"] = probe_accuracy(head, features, labels);
        const auto [si, so] = evaluate_probe(head, in.matrix, out.matrix, kind, features, labels);
        row.auroc = auroc(si, so).auroc;
        if (!a.head_out.empty()) {
            DatasetManifest man = train.manifest;
            man.name = train.manifest.name + "-probe";
            man.class_names.reset();
            man.extra["probe"] = row.extra;
            write_head(head, man, a.head_out);
        }
    }
    row.runtime_ms = clock.elapsed_ms();
    EvalReport report;
    report.rows.push_back(std::move(row));
    emit(report, a.json_path);
    return kExitOk;
}

// ---------------------------------------------------------------------------

struct EncoderArgs {
    std::string spec = "toy";
    std::size_t feature_dim = 32;
    std::uint64_t toy_seed = 1;
};

struct AttackArgs {
    std::string out_images, in_images, output;
    EncoderArgs encoder;
    AttackConfig cfg;
};

int cmd_attack(const AttackArgs& a) {
    const auto out = read_images(a.out_images);
    const auto in = read_images(a.in_images);
    const ImageShape shape = out.images.front().shape();
    require(in.images.front().shape() == shape, ErrorCode::DimensionMismatch,
            "OOD and in-distribution images have different shapes");
    auto encoder = make_encoder(a.encoder.spec, shape, a.encoder.feature_dim, a.encoder.toy_seed);

    const auto ds = build_adversarial_dataset(out.images, in.images, *encoder, a.cfg, a.cfg.seed);
    const std::string suffix = a.cfg.lambda_smooth > 0.0 ? "-AS" : "-A";

    std::vector<ImageTensor> perturbed;
    double init = 0.0, final_sim = 0.0;
    std::size_t successes = 0;
    for (const auto& r : ds.results) {
        perturbed.push_back(r.perturbed_image);
        init += r.initial_similarity;
        final_sim += r.final_similarity;
        successes += r.success;
    }
    const double n = double(ds.results.size());

    DatasetManifest man = out.manifest;
    man.name = out.manifest.name + suffix;
    man.role = DatasetRole::OutTest;
    man.extractor = encoder_label(a.encoder.spec, a.encoder.feature_dim, a.encoder.toy_seed);
    man.extra["attack"] = {{"source", out.manifest.name}, {"targets_from", in.manifest.name},
                           {"steps", a.cfg.steps},        {"lr", a.cfg.lr},
                           {"lambda", a.cfg.lambda_smooth}, {"init_sigma", a.cfg.init_sigma},
                           {"seed", a.cfg.seed}};
    const std::string image_path = a.output + suffix + ".oodk";
    const std::string target_path = a.output + suffix + ".targets.json";
    write_images(perturbed, out.labels, man, image_path);
    write_json({{"in_dataset", in.manifest.name},
                {"out_dataset", man.name},
                {"seed", a.cfg.seed},
                {"target_indices", ds.target_indices}},
               target_path);

    std::printf("%s: %zu images, mean similarity %.4f -> %.4f, %zu improved\n", man.name.c_str(),
                ds.results.size(), init / n, final_sim / n, successes);
    std::printf("wrote %s and %s\n", image_path.c_str(), target_path.c_str());
    return kExitOk;
}

struct EncodeArgs {
    std::string images, output;
    EncoderArgs encoder;
};

int cmd_encode(const EncodeArgs& a) {
    const auto f = read_images(a.images);
    const ImageShape shape = f.images.front().shape();
    auto encoder = make_encoder(a.encoder.spec, shape, a.encoder.feature_dim, a.encoder.toy_seed);
    std::vector<float> values;
    std::size_t dim = 0;
    for (const auto& img : f.images) {
        const auto feat = encoder->encode(shape, img.pixels_as_double());
        if (dim == 0) dim = feat.size();
        require(feat.size() == dim, ErrorCode::DimensionMismatch, "encoder changed its output dimension");
        values.insert(values.end(), feat.begin(), feat.end());
    }
    DatasetManifest man = f.manifest;
    man.extractor = encoder_label(a.encoder.spec, a.encoder.feature_dim, a.encoder.toy_seed);
    write_embeddings(FeatureMatrix(f.images.size(), dim, std::move(values)), f.labels, man, a.output);
    std::printf("%s: %zu x %zu features -> %s\n", man.name.c_str(), f.images.size(), dim, a.output.c_str());
    return kExitOk;
}

// ---------------------------------------------------------------------------

struct KnnArgs {
    std::string train, test, json_path;
    std::size_t k = 20;
    bool normalize = false;
};

int cmd_knn_acc(const KnnArgs& a) {
    const auto train = load(a.train, a.normalize);
    const auto test = load(a.test, a.normalize);
    const auto& train_labels = labels_of(train, "--train", "knn-acc");
    const auto& test_labels = labels_of(test, "--test", "knn-acc");
    const auto preds = knn_classify(train.matrix, train_labels, test.matrix, a.k);
    const double acc = knn_accuracy(preds, test_labels);
    std::printf("%s -> %s  k=%zu  accuracy %.4f\n", train.manifest.name.c_str(), test.manifest.name.c_str(), a.k,
                acc);
    if (!a.json_path.empty()) {
        write_json({{"train", train.manifest.name}, {"test", test.manifest.name}, {"k", a.k}, {"accuracy", acc}},
                   a.json_path);
    }
    return kExitOk;
}

struct ReportArgs {
    std::vector<std::string> inputs;
    std::string json_path;
};

int cmd_report(const ReportArgs& a) {
    EvalReport merged;
    for (const auto& path : a.inputs) {
        std::ifstream in(path);
        require(bool(in), ErrorCode::Io, "cannot open " + path);
        json j;
        try {
            j = json::parse(in);
        } catch (const json::exception& e) {
            fail(ErrorCode::MalformedContainer, path + ": " + e.what());
        }
        const auto rep = EvalReport::from_json(j);
        merged.rows.insert(merged.rows.end(), rep.rows.begin(), rep.rows.end());
    }
    emit(merged, a.json_path);
    return kExitOk;
}

void add_encoder_flags(CLI::App* cmd, EncoderArgs& e) {
    cmd->add_option("--encoder", e.spec, "toy or bridge:<command>")->capture_default_str();
    cmd->add_option("--feature-dim", e.feature_dim, "toy encoder output dimension")->capture_default_str();
    cmd->add_option("--toy-seed", e.toy_seed, "toy encoder weight seed")->capture_default_str();
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"OOD detection evaluation on precomputed embeddings"};
    app.require_subcommand(1);

    EvalArgs ev;
    auto* eval = app.add_subcommand("eval", "score in/out test sets against a reference and report AUROC");
    eval->add_option("--in-train", ev.in_train, "reference embeddings")->check(CLI::ExistingFile);
    eval->add_option("--in-test", ev.in_test, "in-distribution test embeddings (or logits for msp)")
        ->required()
        ->check(CLI::ExistingFile);
    eval->add_option("--out-test", ev.out_test, "out-of-distribution test embeddings")
        ->required()
        ->check(CLI::ExistingFile);
    eval->add_option("--score", ev.scores, "nn, md, rmd, kmeans-md, msp; repeatable")
        ->delimiter(',')
        ->capture_default_str();
    eval->add_option("--epsilon", ev.epsilon, "covariance ridge (default 1e-6 * trace / D)");
    eval->add_option("--kmeans-k", ev.kmeans_k, "clusters for kmeans-md")->capture_default_str();
    eval->add_option("--exclude-targets", ev.exclude, "attack targets file; drops those reference rows")
        ->check(CLI::ExistingFile);
    eval->add_flag("--normalize", ev.normalize, "L2-normalize every row first");
    eval->add_option("--seed", ev.seed, "k-means seed")->capture_default_str();
    eval->add_option("--json", ev.json_path, "write the report as JSON");

    ProbeArgs pr;
    auto* probe = app.add_subcommand("probe", "train a linear head and evaluate it");
    probe->add_option("--in-train", pr.in_train, "training embeddings")->required()->check(CLI::ExistingFile);
    probe->add_option("--in-test", pr.in_test)->required()->check(CLI::ExistingFile);
    probe->add_option("--out-test", pr.out_test)->required()->check(CLI::ExistingFile);
    probe->add_option("--score", pr.score, "msp or rmd-logits")->capture_default_str();
    probe->add_option("--few-shot-p", pr.few_shot_p, "samples per class; averages 5 seeded runs");
    probe->add_option("--pseudo-logits", pr.pseudo_logits, "zero-shot logits for pseudo-labels")
        ->check(CLI::ExistingFile);
    probe->add_option("--threshold", pr.threshold, "pseudo-label confidence")->capture_default_str();
    probe->add_option("--steps", pr.steps, "optimizer steps (20000; 10000 for few-shot)");
    probe->add_option("--batch-size", pr.cfg.batch_size)->capture_default_str();
    probe->add_option("--wd", pr.cfg.weight_decay)->capture_default_str();
    probe->add_option("--lr-start", pr.cfg.lr_start)->capture_default_str();
    probe->add_option("--lr-end", pr.cfg.lr_end)->capture_default_str();
    probe->add_option("--seed", pr.cfg.seed)->capture_default_str();
    probe->add_option("--head-out", pr.head_out, "write the trained head");
    probe->add_flag("--normalize", pr.normalize);
    probe->add_option("--json", pr.json_path);

    AttackArgs at;
    auto* atk = app.add_subcommand("attack", "perturb OOD images toward random in-distribution features");
    atk->add_option("--out-images", at.out_images)->required()->check(CLI::ExistingFile);
    atk->add_option("--in-images", at.in_images)->required()->check(CLI::ExistingFile);
    atk->add_option("--output", at.output, "output stem; -A or -AS is appended")->required();
    add_encoder_flags(atk, at.encoder);
    atk->add_option("--steps", at.cfg.steps)->capture_default_str();
    atk->add_option("--lr", at.cfg.lr)->capture_default_str();
    atk->add_option("--lambda", at.cfg.lambda_smooth, "smoothness weight (5e3 for -AS)")->capture_default_str();
    atk->add_option("--init-sigma", at.cfg.init_sigma)->capture_default_str();
    atk->add_option("--seed", at.cfg.seed)->capture_default_str();

    EncodeArgs en;
    auto* enc = app.add_subcommand("encode", "embed an image container with an encoder");
    enc->add_option("--images", en.images)->required()->check(CLI::ExistingFile);
    enc->add_option("--output", en.output)->required();
    add_encoder_flags(enc, en.encoder);

    KnnArgs kn;
    auto* knn = app.add_subcommand("knn-acc", "k-NN classification accuracy");
    knn->add_option("--train", kn.train)->required()->check(CLI::ExistingFile);
    knn->add_option("--test", kn.test)->required()->check(CLI::ExistingFile);
    knn->add_option("--k", kn.k)->capture_default_str();
    knn->add_flag("--normalize", kn.normalize);
    knn->add_option("--json", kn.json_path);

    ReportArgs rp;
    auto* rep = app.add_subcommand("report", "merge JSON reports into one table");
    rep->add_option("inputs", rp.inputs)->required()->check(CLI::ExistingFile);
    rep->add_option("--json", rp.json_path);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kExitOk : kExitContract;
    }

    try {
        if (*eval) return cmd_eval(ev);
        if (*probe) return cmd_probe(pr);
        if (*atk) return cmd_attack(at);
        if (*enc) return cmd_encode(en);
        if (*knn) return cmd_knn_acc(kn);
        if (*rep) return cmd_report(rp);
    } catch (const Error& e) {
        std::cerr << "oodkit: " << e.what() << "\n";
        return exit_code_for(e.code());
    } catch (const std::exception& e) {
        std::cerr << "oodkit: " << e.what() << "\n";
        return kExitOther;
    }
    return kExitOther;
}

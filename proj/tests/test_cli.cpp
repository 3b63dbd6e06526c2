#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include <sys/wait.h>
#include <unistd.h>

#include <json.hpp>

#include "oodkit/embedding_store.hpp"
#include "oodkit/probing.hpp"
#include "oracles.hpp"

using namespace oodkit;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Run {
    int code = -1;
    std::string out;
    std::string err;
};

std::string slurp(const fs::path& p) {
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

class Sandbox {
public:
    Sandbox() {
        dir_ = fs::temp_directory_path() / ("oodkit_cli_" + std::to_string(::getpid()) + "_" + std::to_string(next_++));
        fs::create_directories(dir_);
    }
    ~Sandbox() { fs::remove_all(dir_); }

    std::string path(const std::string& name) const { return (dir_ / name).string(); }

    Run run(const std::string& args) const {
        const std::string cmd = std::string(OODKIT_CLI) + " " + args + " > " + path("stdout") + " 2> " + path("stderr");
        const int status = std::system(cmd.c_str());
        Run r;
        r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
        r.out = slurp(path("stdout"));
        r.err = slurp(path("stderr"));
        return r;
    }

    json run_json(const std::string& args) const {
        const auto r = run(args + " --json " + path("report.json"));
        INFO(r.err);
        REQUIRE(r.code == 0);
        return json::parse(slurp(path("report.json")));
    }

    std::string features(const std::string& name, const FeatureMatrix& m, const std::optional<LabelVector>& y,
                         DatasetRole role = DatasetRole::InTrain) const {
        DatasetManifest man;
        man.name = name;
        man.role = role;
        man.extractor = "fixture";
        write_embeddings(m, y, man, path(name + ".oodk"));
        return path(name + ".oodk");
    }

    std::string images(const std::string& name, const std::vector<ImageTensor>& imgs) const {
        DatasetManifest man;
        man.name = name;
        man.role = DatasetRole::InTrain;
        man.extractor = "fixture";
        write_images(imgs, std::nullopt, man, path(name + ".oodk"));
        return path(name + ".oodk");
    }

private:
    fs::path dir_;
    static inline int next_ = 0;
};

json strip_runtime(json j) {
    for (auto& row : j["rows"]) row.erase("runtime_ms");
    return j;
}

// Two labeled in-distribution blobs and an OOD blob elsewhere.
struct Fixture {
    std::string train, test, out, train_unlabeled;
};

Fixture separated(const Sandbox& box, std::uint64_t seed = 71) {
    std::mt19937_64 rng(seed);
    const std::vector<std::vector<double>> centers = {{6, 0, 0, 0}, {0, 6, 0, 0}};
    const auto ytr = gen::balanced_labels(rng, 120, 2);
    const auto yte = gen::balanced_labels(rng, 40, 2);
    const auto tr = gen::blobs(rng, centers, ytr, 0.5);
    const auto te = gen::blobs(rng, centers, yte, 0.5);
    const auto ood = gen::blobs(rng, {{0, 0, 6, 0}}, LabelVector{std::vector<std::uint32_t>(30, 0), 1}, 0.5);
    return {box.features("blobs-train", tr, ytr), box.features("blobs-test", te, yte, DatasetRole::InTest),
            box.features("far", ood, std::nullopt, DatasetRole::OutTest),
            box.features("blobs-train-nolabels", tr, std::nullopt)};
}

}  // namespace

TEST_CASE("eval reports perfect separation") {
    Sandbox box;
    const auto f = separated(box);
    const auto j = box.run_json("eval --in-train " + f.train + " --in-test " + f.test + " --out-test " + f.out +
                                " --score nn,md,rmd,kmeans-md");
    REQUIRE(j["rows"].size() == 4);
    for (const auto& row : j["rows"]) {
        CHECK(row["in"] == "blobs-train");
        CHECK(row["out"] == "far");
        CHECK(row["auroc"].get<double>() == 1.0);
    }
    CHECK(j["rows"][3]["extra"]["k"] == 5);
    const auto text = box.run("eval --in-train " + f.train + " --in-test " + f.test + " --out-test " + f.out);
    CHECK(text.code == 0);
    CHECK(text.out.find("100.0") != std::string::npos);
}

TEST_CASE("eval nn matches the oracle end to end") {
    Sandbox box;
    std::mt19937_64 rng(72);
    const auto tr = gen::gaussian_matrix(rng, 60, 5);
    const auto in = gen::gaussian_matrix(rng, 25, 5, 0.3);
    const auto out = gen::gaussian_matrix(rng, 35, 5);
    const auto j = box.run_json("eval --in-train " + box.features("tr", tr, std::nullopt) + " --in-test " +
                                box.features("in", in, std::nullopt) + " --out-test " +
                                box.features("out", out, std::nullopt) + " --score nn");
    const double want = oracle::pair_count_auroc(oracle::nn_scores(tr, in), oracle::nn_scores(tr, out));
    CHECK(j["rows"][0]["auroc"].get<double>() == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("eval exit codes") {
    Sandbox box;
    const auto f = separated(box);
    std::mt19937_64 rng(73);
    const auto wide = box.features("wide", gen::gaussian_matrix(rng, 10, 7), std::nullopt, DatasetRole::OutTest);
    const std::string base = " --in-test " + f.test + " --out-test ";

    auto r = box.run("eval --in-train " + f.train_unlabeled + base + f.out + " --score rmd");
    CHECK(r.code == 2);
    CHECK(r.err.find("requires labels") != std::string::npos);
    CHECK(box.run("eval --in-train " + f.train + base + wide + " --score nn").code == 3);
    CHECK(box.run("eval --in-train " + box.path("missing.oodk") + base + f.out).code == 2);
    CHECK(box.run("eval --in-train " + f.train + base + f.out + " --score odin").code == 2);
    CHECK(box.run("eval" + base + f.out + " --score nn").code == 2);
    CHECK(box.run("").code == 2);

    std::ofstream(box.path("junk.oodk")) << "not a container";
    CHECK(box.run("eval --in-train " + box.path("junk.oodk") + base + f.out).code == 1);
}

TEST_CASE("eval and probe are deterministic") {
    Sandbox box;
    const auto f = separated(box);
    const std::string args = " --in-train " + f.train + " --in-test " + f.test + " --out-test " + f.out;
    const auto a = box.run_json("eval" + args + " --score kmeans-md,md --seed 4");
    const auto b = box.run_json("eval" + args + " --score kmeans-md,md --seed 4");
    CHECK(strip_runtime(a) == strip_runtime(b));
    const auto p = box.run_json("probe" + args + " --steps 200 --seed 2");
    const auto q = box.run_json("probe" + args + " --steps 200 --seed 2");
    CHECK(strip_runtime(p) == strip_runtime(q));
}

TEST_CASE("probe modes") {
    Sandbox box;
    const auto f = separated(box);
    const std::string args = " --in-train " + f.train + " --in-test " + f.test + " --out-test " + f.out;

    SUBCASE("full probing") {
        const auto j = box.run_json("probe" + args + " --steps 500 --head-out " + box.path("head.oodk"));
        const auto& row = j["rows"][0];
        CHECK(row["score"] == "msp");
        CHECK(row["extra"]["mode"] == "full");
        CHECK(row["extra"]["train_accuracy"].get<double>() >= 0.99);
        CHECK(row["auroc"].get<double>() == 1.0);
        const auto head = read_head(box.path("head.oodk"));
        CHECK(head.n_classes == 2);
        CHECK(head.feature_dim == 4);
        const auto rmd = box.run_json("probe" + args + " --steps 500 --score rmd-logits");
        CHECK(rmd["rows"][0]["auroc"].get<double>() > 0.9);
    }
    SUBCASE("few-shot") {
        const auto j = box.run_json("probe" + args + " --few-shot-p 5 --steps 200");
        const auto& row = j["rows"][0];
        CHECK(row["extra"]["mode"] == "few-shot");
        CHECK(row["extra"]["runs"] == 5);
        CHECK(row["extra"]["aurocs"].size() == 5);
        CHECK(box.run("probe" + args + " --few-shot-p 61 --steps 10").code == 2);
        CHECK(box.run("probe" + args + " --few-shot-p 5 --score rmd-logits --steps 10").code == 2);
    }
    SUBCASE("pseudo-labels") {
        // Confident logits for the first 100 rows, uninformative for the rest.
        const auto train = read_embeddings(f.train);
        std::vector<std::vector<float>> rows;
        for (std::size_t i = 0; i < train.matrix.n_samples(); ++i) {
            const float hi = i < 100 ? 8.0f : 0.1f;
            rows.push_back(train.labels->labels[i] == 0 ? std::vector<float>{hi, 0, 0} : std::vector<float>{0, hi, 0});
        }
        const auto logits = box.features("zs", FeatureMatrix::from_rows(rows), std::nullopt);
        const auto j = box.run_json("probe" + args + " --pseudo-logits " + logits + " --steps 300");
        const auto& row = j["rows"][0];
        CHECK(row["extra"]["mode"] == "pseudo-label");
        CHECK(row["extra"]["kept"] == 100);
        CHECK(row["extra"]["classes_kept"] == 2);
        CHECK(row["extra"]["threshold"] == 0.9);
        const auto wrong = box.features("zs-short", FeatureMatrix::from_rows({{1, 0}, {0, 1}}), std::nullopt);
        CHECK(box.run("probe" + args + " --pseudo-logits " + wrong).code == 3);
    }
    SUBCASE("unlabeled training set") {
        CHECK(box.run("probe --in-train " + f.train_unlabeled + " --in-test " + f.test + " --out-test " + f.out +
                      " --steps 10")
                  .code == 2);
    }
}

TEST_CASE("knn-acc") {
    Sandbox box;
    const auto f = separated(box);
    auto r = box.run("knn-acc --train " + f.train + " --test " + f.train + " --k 1");
    CHECK(r.code == 0);
    CHECK(r.out.find("accuracy 1.0000") != std::string::npos);
    r = box.run("knn-acc --train " + f.train + " --test " + f.test);
    CHECK(r.out.find("k=20") != std::string::npos);
    std::mt19937_64 rng(74);
    const LabelVector y{{0, 1, 0}, 2};
    const auto wide = box.features("wide", gen::gaussian_matrix(rng, 3, 5), y);
    CHECK(box.run("knn-acc --train " + f.train + " --test " + wide).code == 3);
}

TEST_CASE("report merges json files") {
    Sandbox box;
    const auto f = separated(box);
    const std::string args = " --in-train " + f.train + " --in-test " + f.test + " --out-test " + f.out;
    CHECK(box.run("eval" + args + " --score nn --json " + box.path("a.json")).code == 0);
    CHECK(box.run("eval" + args + " --score md --json " + box.path("b.json")).code == 0);
    const auto r = box.run("report " + box.path("a.json") + " " + box.path("b.json") + " --json " + box.path("c.json"));
    CHECK(r.code == 0);
    const auto merged = json::parse(slurp(box.path("c.json")));
    REQUIRE(merged["rows"].size() == 2);
    CHECK(merged["rows"][1]["score"] == "md");
}

TEST_CASE("attack, encode and eval with excluded targets") {
    Sandbox box;
    std::mt19937_64 rng(75);
    std::vector<ImageTensor> in, out;
    for (int i = 0; i < 20; ++i) in.push_back(gen::uniform_image(rng, 4, 4, 0.4, 0.6));
    for (int i = 0; i < 10; ++i) out.push_back(gen::uniform_image(rng, 4, 4));
    const auto in_path = box.images("cloud", in);
    const auto out_path = box.images("noise", out);
    const std::string common = "--out-images " + out_path + " --in-images " + in_path + " --feature-dim 8";

    auto r = box.run("attack " + common + " --output " + box.path("noise") + " --steps 40");
    INFO(r.err);
    REQUIRE(r.code == 0);
    const auto adv = read_images(box.path("noise-A.oodk"));
    CHECK(adv.images.size() == 10);
    CHECK(adv.manifest.name == "noise-A");
    for (const auto& img : adv.images)
        for (float p : img.pixels()) CHECK((p >= 0.0f && p <= 1.0f));
    const auto targets = json::parse(slurp(box.path("noise-A.targets.json")));
    CHECK(targets["target_indices"].size() == 10);

    r = box.run("attack " + common + " --output " + box.path("noise") + " --steps 40 --lambda 5e3");
    CHECK(r.code == 0);
    CHECK(fs::exists(box.path("noise-AS.oodk")));
    CHECK(fs::exists(box.path("noise-AS.targets.json")));
    CHECK(read_images(box.path("noise-AS.oodk")).manifest.extra["attack"]["lambda"] == 5e3);

    // Same run twice: identical bytes.
    const auto first = slurp(box.path("noise-A.oodk"));
    CHECK(box.run("attack " + common + " --output " + box.path("noise") + " --steps 40").code == 0);
    CHECK(slurp(box.path("noise-A.oodk")) == first);

    CHECK(box.run("encode --images " + in_path + " --output " + box.path("cloud-f.oodk") + " --feature-dim 8").code == 0);
    CHECK(box.run("encode --images " + box.path("noise-A.oodk") + " --output " + box.path("adv-f.oodk") +
                  " --feature-dim 8")
              .code == 0);
    const auto j = box.run_json("eval --in-train " + box.path("cloud-f.oodk") + " --in-test " +
                                box.path("cloud-f.oodk") + " --out-test " + box.path("adv-f.oodk") +
                                " --exclude-targets " + box.path("noise-A.targets.json"));
    const std::set<std::size_t> distinct(targets["target_indices"].begin(), targets["target_indices"].end());
    CHECK(j["rows"][0]["extra"]["reference_rows"] == 20 - distinct.size());
}

TEST_CASE("attack over the bridge") {
    Sandbox box;
    std::mt19937_64 rng(76);
    std::vector<ImageTensor> in, out;
    for (int i = 0; i < 3; ++i) in.push_back(gen::uniform_image(rng, 4, 4));
    for (int i = 0; i < 2; ++i) out.push_back(gen::uniform_image(rng, 4, 4));
    const std::string common = "--out-images " + box.images("o", out) + " --in-images " + box.images("i", in) +
                               " --output " + box.path("o") + " --steps 10";
    const std::string bridge = std::string(OODKIT_TOY_BRIDGE) + " --height 4 --width 4 --feature-dim 8";
    auto r = box.run("attack " + common + " --encoder 'bridge:" + bridge + "'");
    INFO(r.err);
    CHECK(r.code == 0);
    CHECK(read_images(box.path("o-A.oodk")).images.size() == 2);

    r = box.run("attack " + common + " --encoder 'bridge:exit 0'");
    CHECK(r.code == 4);
    CHECK(r.err.find("bridge") != std::string::npos);
    CHECK(box.run("attack " + common + " --encoder nope").code == 2);
}

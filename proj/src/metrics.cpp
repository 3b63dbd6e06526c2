#include "oodkit/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <sstream>

namespace oodkit {

double auroc(const std::vector<double>& in_scores, const std::vector<double>& out_scores) {
    require(!in_scores.empty() && !out_scores.empty(), ErrorCode::ContractViolation,
            "auroc needs non-empty in and out score lists");
    const std::size_t n_in = in_scores.size();
    const std::size_t n = n_in + out_scores.size();

    std::vector<double> all;
    all.reserve(n);
    all.insert(all.end(), in_scores.begin(), in_scores.end());
    all.insert(all.end(), out_scores.begin(), out_scores.end());
    for (double s : all) {
        require(std::isfinite(s), ErrorCode::InvariantViolation, "auroc: non-finite score");
    }

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return all[a] < all[b]; });

    // A tie group at sorted positions [i, j) has 1-based ranks i+1..j; twice
    // its midrank is the integer i + 1 + j.
    std::uint64_t twice_rank_sum_in = 0;
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i + 1;
        while (j < n && all[order[j]] == all[order[i]]) ++j;
        const std::uint64_t twice_mid = i + 1 + j;
        for (std::size_t t = i; t < j; ++t) {
            if (order[t] < n_in) twice_rank_sum_in += twice_mid;
        }
        i = j;
    }
    const std::uint64_t twice_u = twice_rank_sum_in - std::uint64_t(n_in) * (n_in + 1);
    return double(twice_u) / (2.0 * double(n_in) * double(out_scores.size()));
}

AurocResult auroc(const ScoreVector& in_scores, const ScoreVector& out_scores) {
    require(in_scores.kind == out_scores.kind, ErrorCode::ContractViolation,
            "auroc: in and out scores come from different score kinds");
    AurocResult r;
    r.auroc = auroc(in_scores.scores, out_scores.scores);
    r.n_in = in_scores.size();
    r.n_out = out_scores.size();
    r.score_kind = to_string(in_scores.kind);
    return r;
}

double knn_accuracy(const std::vector<std::uint32_t>& predictions, const LabelVector& labels) {
    require(predictions.size() == labels.size(), ErrorCode::DimensionMismatch,
            "prediction count does not match label count");
    require(!predictions.empty(), ErrorCode::ContractViolation, "no predictions");
    std::size_t hits = 0;
    for (std::size_t i = 0; i < predictions.size(); ++i) hits += predictions[i] == labels.labels[i];
    return double(hits) / double(predictions.size());
}

nlohmann::json EvalReport::to_json() const {
    nlohmann::json rows_json = nlohmann::json::array();
    for (const auto& r : rows) {
        nlohmann::json j = {{"in", r.in_dataset},   {"out", r.out_dataset},
                            {"score", r.score},     {"auroc", r.auroc},
                            {"runtime_ms", r.runtime_ms}};
        if (!r.extra.empty()) j["extra"] = r.extra;
        rows_json.push_back(std::move(j));
    }
    return {{"rows", rows_json}};
}

EvalReport EvalReport::from_json(const nlohmann::json& j) {
    EvalReport rep;
    try {
        for (const auto& r : j.at("rows")) {
            ReportRow row;
            row.in_dataset = r.at("in").get<std::string>();
            row.out_dataset = r.at("out").get<std::string>();
            row.score = r.at("score").get<std::string>();
            row.auroc = r.at("auroc").get<double>();
            row.runtime_ms = r.value("runtime_ms", 0.0);
            if (r.contains("extra")) row.extra = r["extra"];
            rep.rows.push_back(std::move(row));
        }
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorCode::ContractViolation, std::string("malformed report JSON: ") + e.what());
    }
    return rep;
}

std::string EvalReport::to_text() const {
    const std::vector<std::string> head = {"in", "out", "score", "AUROC(%)", "runtime(ms)"};
    std::vector<std::vector<std::string>> cells;
    for (const auto& r : rows) {
        std::ostringstream a, t;
        a << std::fixed << std::setprecision(1) << 100.0 * r.auroc;
        t << std::fixed << std::setprecision(1) << r.runtime_ms;
        cells.push_back({r.in_dataset, r.out_dataset, r.score, a.str(), t.str()});
    }
    std::vector<std::size_t> width(head.size());
    for (std::size_t c = 0; c < head.size(); ++c) {
        width[c] = head[c].size();
        for (const auto& row : cells) width[c] = std::max(width[c], row[c].size());
    }
    std::ostringstream os;
    auto line = [&](const std::vector<std::string>& row) {
        for (std::size_t c = 0; c < row.size(); ++c) {
            if (c) os << "  ";
            // text columns left-aligned, numeric columns right-aligned
            if (c < 3) {
                os << std::left << std::setw(int(width[c])) << row[c];
            } else {
                os << std::right << std::setw(int(width[c])) << row[c];
            }
        }
        os << '\n';
    };
    line(head);
    std::size_t total = 0;
    for (auto w : width) total += w;
    os << std::string(total + 2 * (width.size() - 1), '-') << '\n';
    for (const auto& row : cells) line(row);
    return os.str();
}

}  // namespace oodkit

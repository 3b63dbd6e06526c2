#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "oodkit/detection_scores.hpp"

namespace oodkit {

struct AurocResult {
    double auroc = 0.5;
    std::size_t n_in = 0;
    std::size_t n_out = 0;
    std::string score_kind;
};

/// P(S_in > S_out) + ½·P(S_in = S_out) with in-distribution as the positive
/// class. Exact: midranks are kept as doubled integers, so the result is the
/// single division (2U) / (2·n_in·n_out).
AurocResult auroc(const ScoreVector& in_scores, const ScoreVector& out_scores);
double auroc(const std::vector<double>& in_scores, const std::vector<double>& out_scores);

double knn_accuracy(const std::vector<std::uint32_t>& predictions, const LabelVector& labels);

struct ReportRow {
    std::string in_dataset;
    std::string out_dataset;
    std::string score;
    double auroc = 0.0;
    double runtime_ms = 0.0;
    /// Free-form notes (kept-sample counts and the like); omitted from JSON when empty.
    nlohmann::json extra = nlohmann::json::object();
};

struct EvalReport {
    std::vector<ReportRow> rows;

    /// {"rows":[{"in":…, "out":…, "score":…, "auroc":…, "runtime_ms":…}]}
    nlohmann::json to_json() const;
    static EvalReport from_json(const nlohmann::json& j);
    /// Aligned table, AUROC in percent with one decimal.
    std::string to_text() const;
};

}  // namespace oodkit

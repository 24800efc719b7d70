#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "lat/evalkit.hpp"

namespace lat {

// Fixed column order; absent metrics serialize as empty cells.
extern const std::vector<std::string>& metrics_csv_columns();

std::string metrics_csv_header(const std::string& config_hash);
std::string metrics_csv_row(const MetricsRecord& rec);

struct ParsedCsv {
    std::vector<std::string> columns;
    std::vector<std::vector<std::optional<float>>> rows;  // numeric cells
    std::string config_hash;  // from the leading "# config=" comment, if any
};
ParsedCsv parse_metrics_csv(const std::string& text);

// One SVG line chart per metric family (losses, rates, perplexities); series
// with no data are dropped. Returns filename -> svg text; the csv's config
// hash is carried into each file as a comment.
std::map<std::string, std::string> render_metric_plots(const ParsedCsv& csv);

std::string format_float(float v);

}  // namespace lat

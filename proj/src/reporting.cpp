#include "lat/reporting.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <sstream>

namespace lat {

std::string format_float(float v) {
    char buf[48];
    auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::general);
    return std::string(buf, end);
}

const std::vector<std::string>& metrics_csv_columns() {
    static const std::vector<std::string> cols{
        "step",          "attack_loss", "defense_loss", "benign_loss", "trigger_success",
        "compliance",    "forget_acc",  "retain_acc",   "forget_ppl",  "retain_ppl",
        "gap_closed",    "nan_skips"};
    return cols;
}

std::string metrics_csv_header(const std::string& config_hash) {
    std::string out = "# config=" + config_hash + "\n";
    const auto& cols = metrics_csv_columns();
    for (size_t i = 0; i < cols.size(); ++i) {
        if (i) out += ",";
        out += cols[i];
    }
    return out + "\n";
}

namespace {

std::string cell(const std::optional<float>& v) { return v ? format_float(*v) : ""; }

}  // namespace

std::string metrics_csv_row(const MetricsRecord& rec) {
    std::string out = std::to_string(rec.step);
    out += "," + cell(rec.attack_loss);
    out += "," + cell(rec.defense_loss);
    out += "," + cell(rec.benign_loss);
    out += "," + cell(rec.trigger_success_rate);
    out += "," + cell(rec.compliance_rate);
    out += "," + cell(rec.forget_accuracy);
    out += "," + cell(rec.retain_accuracy);
    out += "," + cell(rec.forget_ppl);
    out += "," + cell(rec.retain_ppl);
    out += "," + cell(rec.gap_closed);
    out += "," + std::to_string(rec.nan_skips);
    return out + "\n";
}

ParsedCsv parse_metrics_csv(const std::string& text) {
    ParsedCsv out;
    std::stringstream ss(text);
    std::string line;
    bool header_done = false;
    while (std::getline(ss, line)) {
        if (line.empty()) continue;
        if (line[0] == '#') {
            size_t at = line.find("config=");
            if (at != std::string::npos && out.config_hash.empty()) out.config_hash = line.substr(at + 7);
            continue;
        }
        std::vector<std::string> cells;
        std::stringstream ls(line);
        std::string c;
        while (std::getline(ls, c, ',')) cells.push_back(c);
        // a trailing empty cell is dropped by getline; restore it
        if (!line.empty() && line.back() == ',') cells.push_back("");
        if (!header_done) {
            out.columns = cells;
            header_done = true;
            continue;
        }
        std::vector<std::optional<float>> row;
        for (const std::string& s : cells) {
            if (s.empty()) {
                row.push_back(std::nullopt);
            } else {
                float v = 0.0f;
                auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
                if (ec != std::errc{})
                    row.push_back(std::nullopt);
                else
                    row.push_back(v);
            }
        }
        row.resize(out.columns.size());
        out.rows.push_back(std::move(row));
    }
    return out;
}

namespace {

struct Series {
    std::string name;
    std::vector<std::pair<float, float>> points;  // (step, value)
};

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};

std::string render_chart(const std::string& title, const std::vector<Series>& series,
                         const std::string& config_hash) {
    const float W = 640, H = 400, L = 60, R = 150, T = 40, B = 40;
    float xmin = 1e30f, xmax = -1e30f, ymin = 1e30f, ymax = -1e30f;
    for (const Series& s : series)
        for (auto [x, y] : s.points) {
            xmin = std::min(xmin, x);
            xmax = std::max(xmax, x);
            ymin = std::min(ymin, y);
            ymax = std::max(ymax, y);
        }
    if (xmax <= xmin) xmax = xmin + 1.0f;
    if (ymax <= ymin) ymax = ymin + 1.0f;
    float yspan = ymax - ymin;
    ymin -= 0.05f * yspan;
    ymax += 0.05f * yspan;

    auto px = [&](float x) { return L + (x - xmin) / (xmax - xmin) * (W - L - R); };
    auto py = [&](float y) { return H - B - (y - ymin) / (ymax - ymin) * (H - T - B); };

    std::ostringstream svg;
    svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n";
    if (!config_hash.empty()) svg << "<!-- config=" << config_hash << " -->\n";
    svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    svg << "<text x=\"" << L << "\" y=\"24\" font-family=\"sans-serif\" font-size=\"16\">" << title
        << "</text>\n";
    svg << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B
        << "\" stroke=\"black\"/>\n";
    svg << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B
        << "\" stroke=\"black\"/>\n";
    svg << "<text x=\"" << L << "\" y=\"" << H - B + 16 << "\" font-family=\"sans-serif\" font-size=\"11\">"
        << format_float(xmin) << "</text>\n";
    svg << "<text x=\"" << W - R << "\" y=\"" << H - B + 16
        << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">" << format_float(xmax)
        << "</text>\n";
    svg << "<text x=\"" << L - 4 << "\" y=\"" << H - B
        << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">" << format_float(ymin)
        << "</text>\n";
    svg << "<text x=\"" << L - 4 << "\" y=\"" << T + 8
        << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">" << format_float(ymax)
        << "</text>\n";

    int idx = 0;
    for (const Series& s : series) {
        const char* color = kPalette[idx % 6];
        svg << "<polyline class=\"series-" << s.name << "\" fill=\"none\" stroke=\"" << color
            << "\" stroke-width=\"1.5\" points=\"";
        for (auto [x, y] : s.points) svg << px(x) << "," << py(y) << " ";
        svg << "\"/>\n";
        for (auto [x, y] : s.points)
            svg << "<circle class=\"point-" << s.name << "\" cx=\"" << px(x) << "\" cy=\"" << py(y)
                << "\" r=\"2.5\" fill=\"" << color << "\"/>\n";
        svg << "<text x=\"" << W - R + 10 << "\" y=\"" << T + 16 + 18 * idx
            << "\" font-family=\"sans-serif\" font-size=\"12\" fill=\"" << color << "\">" << s.name
            << "</text>\n";
        ++idx;
    }
    svg << "</svg>\n";
    return svg.str();
}

}  // namespace

std::map<std::string, std::string> render_metric_plots(const ParsedCsv& csv) {
    auto col_index = [&](const std::string& name) -> int {
        for (size_t i = 0; i < csv.columns.size(); ++i)
            if (csv.columns[i] == name) return static_cast<int>(i);
        return -1;
    };
    int step_col = col_index("step");
    if (step_col < 0) return {};

    auto collect = [&](const std::vector<std::string>& names) {
        std::vector<Series> out;
        for (const std::string& name : names) {
            int c = col_index(name);
            if (c < 0) continue;
            Series s;
            s.name = name;
            for (const auto& row : csv.rows) {
                if (!row[static_cast<size_t>(step_col)] || !row[static_cast<size_t>(c)]) continue;
                s.points.emplace_back(*row[static_cast<size_t>(step_col)], *row[static_cast<size_t>(c)]);
            }
            if (!s.points.empty()) out.push_back(std::move(s));
        }
        return out;
    };

    std::map<std::string, std::string> files;
    std::vector<Series> losses = collect({"attack_loss", "defense_loss", "benign_loss"});
    if (!losses.empty()) files["losses.svg"] = render_chart("losses", losses, csv.config_hash);
    std::vector<Series> rates =
        collect({"trigger_success", "compliance", "forget_acc", "retain_acc", "gap_closed"});
    if (!rates.empty()) files["rates.svg"] = render_chart("rates", rates, csv.config_hash);
    std::vector<Series> ppl = collect({"forget_ppl", "retain_ppl"});
    if (!ppl.empty()) files["perplexity.svg"] = render_chart("perplexity", ppl, csv.config_hash);
    return files;
}

}  // namespace lat

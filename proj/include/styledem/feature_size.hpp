#pragma once

// Smallest sketch feature the model preserves: Gaussian bumps of varying
// width on a flat sketch go through refine(), and a width counts as
// preserved when the output keeps at least half of the input prominence.

#include <algorithm>
#include <cmath>
#include <vector>

#include <nlohmann/json.hpp>

#include "styledem/bundle.hpp"
#include "styledem/toolbox.hpp"

namespace styledem::eval {

struct FeatureSizeConfig {
    std::vector<double> fractions = {0.02, 0.03, 0.04, 0.05, 0.06, 0.08, 0.10, 0.125, 0.15, 0.20, 0.25, 0.30, 0.35, 0.40, 0.45, 0.50};
    double bump_height_m = 200.0;
    double base_m = 100.0;
    double retention_threshold = 0.5;
    // Bump centers as fractions of the image size.
    std::vector<std::pair<double, double>> centers = {{0.5, 0.5}, {0.3, 0.6}, {0.65, 0.35}};
};

struct FeatureSizeEntry {
    double fraction = 0;   // FWHM / image size
    double retention = 0;  // output prominence / input prominence, averaged over centers
};

struct FeatureSizeReport {
    std::vector<FeatureSizeEntry> entries;
    double threshold_fraction = -1;  // smallest preserved fraction, -1 when none is preserved
    double reference_fraction = 0.05;
};

inline Heightfield gaussian_bump(int R, double cell, double fwhm_cells, double cx, double cy, double base, double height) {
    const double sigma = fwhm_cells / (2.0 * std::sqrt(2.0 * std::log(2.0)));
    Heightfield h(R, R, cell, base);
    for (int y = 0; y < R; ++y)
        for (int x = 0; x < R; ++x) {
            const double r2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
            h.at(x, y) = base + height * std::exp(-0.5 * r2 / (sigma * sigma));
        }
    return h;
}

// Mean inside half the FWHM minus the median beyond 1.5 FWHM.
inline double prominence(const Heightfield& h, double cx, double cy, double fwhm_cells) {
    std::vector<double> inner, outer;
    const double r_in = std::max(1.0, fwhm_cells / 2.0), r_out = 1.5 * fwhm_cells;
    for (int y = 0; y < h.height(); ++y)
        for (int x = 0; x < h.width(); ++x) {
            const double r = std::hypot(x - cx, y - cy);
            if (r <= r_in) inner.push_back(h.at(x, y));
            else if (r >= r_out) outer.push_back(h.at(x, y));
        }
    if (inner.empty() || outer.empty()) return 0.0;
    double mean = 0;
    for (double v : inner) mean += v;
    mean /= static_cast<double>(inner.size());
    std::nth_element(outer.begin(), outer.begin() + static_cast<std::ptrdiff_t>(outer.size() / 2), outer.end());
    return mean - outer[outer.size() / 2];
}

inline FeatureSizeReport feature_size(const ModelBundle& b, const FeatureSizeConfig& cfg = {}) {
    if (!b.encoder_trained) fail_input("bundle", "feature-size evaluation needs a trained encoder");
    const int R = b.resolution();
    const double cell = b.config.cell_size_m();
    FeatureSizeReport report;
    for (double f : cfg.fractions) {
        double acc = 0;
        for (const auto& [fx, fy] : cfg.centers) {
            const double cx = fx * (R - 1), cy = fy * (R - 1), fwhm = f * R;
            const Heightfield sketch = gaussian_bump(R, cell, fwhm, cx, cy, cfg.base_m, cfg.bump_height_m);
            const Heightfield out = toolbox::refine(sketch, b);
            const double p_in = prominence(sketch, cx, cy, fwhm);
            acc += p_in > 0 ? prominence(out, cx, cy, fwhm) / p_in : 0.0;
        }
        report.entries.push_back({f, acc / static_cast<double>(cfg.centers.size())});
    }
    for (const auto& e : report.entries)
        if (e.retention >= cfg.retention_threshold) {
            report.threshold_fraction = e.fraction;
            break;
        }
    return report;
}

inline nlohmann::json to_json(const FeatureSizeReport& r) {
    nlohmann::json entries = nlohmann::json::array();
    for (const auto& e : r.entries) entries.push_back({{"fraction", e.fraction}, {"retention", e.retention}});
    return {{"threshold_fraction", r.threshold_fraction}, {"reference_fraction", r.reference_fraction}, {"widths", entries}};
}

}  // namespace styledem::eval

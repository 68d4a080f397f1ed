#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "forla/mask.hpp"

// Unsupervised segmentation metrics. All four are invariant to relabeling of
// the predicted segments; gt label 0 is background throughout.

namespace forla {

struct BBox {
    size_t r0 = 0, c0 = 0, r1 = 0, c1 = 0;  // inclusive cell coordinates
};

double bbox_iou(const BBox& a, const BBox& b);

struct MetricOptions {
    // Drop the predicted segment that best covers the gt background before
    // instance matching.
    bool exclude_pred_background = true;
    // gt -> best-pred matching with reuse, for sensitivity analysis only;
    // default is global Hungarian assignment.
    bool greedy_matching = false;
};

// Adjusted Rand Index restricted to gt foreground cells. All-background gt
// is defined as 0 (with a warning on stderr).
double fg_ari(const MaskSet& pred, const MaskSet& gt);

// Mean IoU of gt instances with their optimally assigned predicted segments;
// unmatched gt instances score 0. Throws when gt has no instances.
double mbo(const MaskSet& pred, const MaskSet& gt, const MetricOptions& opts = {});

// Percentage of gt instances whose bounding box is hit by some predicted
// segment's bounding box with IoU strictly greater than 0.5.
double corloc(const MaskSet& pred, const MaskSet& gt, const MetricOptions& opts = {});

// Mean symmetric Hausdorff distance (cell centers, Euclidean) between each
// gt instance's boundary and the boundary of its assigned predicted segment,
// reusing the mbo assignment. Unmatched instances contribute the grid
// diagonal. Lower is better.
double mbhd(const MaskSet& pred, const MaskSet& gt, const MetricOptions& opts = {});

struct SceneMetrics {
    double fg_ari = 0, mbo = 0, corloc = 0, mbhd = 0;
    bool has_instances = true;
};

SceneMetrics score_masks(const MaskSet& pred, const MaskSet& gt, const MetricOptions& opts = {});

// Maximum-total-value one-to-one assignment (Kuhn-Munkres on the negated
// matrix). Returns per-row column index or -1 when the row is left to a
// padding column.
std::vector<int> hungarian_max(const std::vector<std::vector<double>>& value);

struct MetricReport {
    struct Row {
        std::string domain;  // domain name or "all"
        size_t n = 0;        // scored scenes
        size_t skipped = 0;  // scenes without gt instances
        double mean_fg_ari = 0, std_fg_ari = 0;
        double mean_mbo = 0, std_mbo = 0;
        double mean_corloc = 0, std_corloc = 0;
        double mean_mbhd = 0, std_mbhd = 0;
    };
    std::vector<Row> rows;

    static Row aggregate(const std::string& domain, const std::vector<SceneMetrics>& scenes);
    const Row* find(const std::string& domain) const;
    std::string to_csv() const;    // domain, metric, mean, std, n
    std::string to_table() const;  // human-readable
};

}  // namespace forla

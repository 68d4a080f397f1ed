#include "forla/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <limits>
#include <map>
#include <sstream>
#include <stdexcept>

namespace forla {

namespace {

void check_grids(const char* op, const MaskSet& pred, const MaskSet& gt) {
    if (pred.h != gt.h || pred.w != gt.w || pred.labels.size() != gt.labels.size()) {
        throw std::invalid_argument(std::string(op) + ": mask grids differ");
    }
}

// label -> list of cell indices, ascending label order
std::vector<std::pair<int, std::vector<size_t>>> regions_of(const MaskSet& m, bool skip_zero) {
    std::map<int, std::vector<size_t>> by_label;
    for (size_t i = 0; i < m.labels.size(); ++i) {
        if (skip_zero && m.labels[i] == 0) continue;
        by_label[m.labels[i]].push_back(i);
    }
    return {by_label.begin(), by_label.end()};
}

BBox bbox_of(const std::vector<size_t>& cells, size_t w) {
    BBox b{size_t(-1), size_t(-1), 0, 0};
    for (size_t i : cells) {
        size_t r = i / w, c = i % w;
        b.r0 = std::min(b.r0, r);
        b.c0 = std::min(b.c0, c);
        b.r1 = std::max(b.r1, r);
        b.c1 = std::max(b.c1, c);
    }
    return b;
}

double region_iou(const std::vector<size_t>& a, const std::vector<size_t>& b) {
    size_t inter = 0, i = 0, j = 0;  // cell lists are sorted
    while (i < a.size() && j < b.size()) {
        if (a[i] == b[j]) {
            ++inter;
            ++i;
            ++j;
        } else if (a[i] < b[j]) {
            ++i;
        } else {
            ++j;
        }
    }
    const size_t uni = a.size() + b.size() - inter;
    return uni == 0 ? 0.0 : double(inter) / double(uni);
}

struct Matching {
    std::vector<std::pair<int, std::vector<size_t>>> gts;    // instances
    std::vector<std::pair<int, std::vector<size_t>>> preds;  // candidate segments
    std::vector<std::vector<double>> iou;                    // gts x preds
    std::vector<int> assignment;                             // per gt: pred index or -1
};

// Shared setup for mbo/corloc/mbhd: foreground instances, candidate
// predicted segments (optionally without the background-covering one), IoU
// matrix and the optimal assignment.
Matching match_instances(const MaskSet& pred, const MaskSet& gt, const MetricOptions& opts) {
    Matching m;
    m.gts = regions_of(gt, /*skip_zero=*/true);
    if (m.gts.empty()) throw std::invalid_argument("metrics: gt mask has no instances");
    m.preds = regions_of(pred, /*skip_zero=*/false);

    if (opts.exclude_pred_background) {
        std::vector<size_t> bg_cells;
        for (size_t i = 0; i < gt.labels.size(); ++i)
            if (gt.labels[i] == 0) bg_cells.push_back(i);
        // Ties broken by first cell index so the choice is relabel-invariant.
        double best = 0.0;
        size_t best_cell = 0;
        int best_idx = -1;
        for (size_t p = 0; p < m.preds.size(); ++p) {
            const double v = region_iou(m.preds[p].second, bg_cells);
            const size_t cell = m.preds[p].second.front();
            if (v > best || (v == best && best_idx >= 0 && cell < best_cell)) {
                best = v;
                best_cell = cell;
                best_idx = int(p);
            }
        }
        if (best_idx >= 0) m.preds.erase(m.preds.begin() + best_idx);
    }

    m.iou.assign(m.gts.size(), std::vector<double>(m.preds.size(), 0.0));
    for (size_t g = 0; g < m.gts.size(); ++g)
        for (size_t p = 0; p < m.preds.size(); ++p) m.iou[g][p] = region_iou(m.gts[g].second, m.preds[p].second);

    if (opts.greedy_matching) {
        m.assignment.assign(m.gts.size(), -1);
        for (size_t g = 0; g < m.gts.size(); ++g) {
            double best = 0.0;
            for (size_t p = 0; p < m.preds.size(); ++p)
                if (m.iou[g][p] > best) {
                    best = m.iou[g][p];
                    m.assignment[g] = int(p);
                }
        }
    } else {
        m.assignment = m.preds.empty() ? std::vector<int>(m.gts.size(), -1) : hungarian_max(m.iou);
    }
    return m;
}

std::vector<size_t> boundary_cells(const std::vector<size_t>& cells, size_t h, size_t w) {
    std::vector<char> in(h * w, 0);
    for (size_t i : cells) in[i] = 1;
    std::vector<size_t> out;
    for (size_t i : cells) {
        size_t r = i / w, c = i % w;
        if (r == 0 || r + 1 == h || c == 0 || c + 1 == w || !in[i - w] || !in[i + w] || !in[i - 1] || !in[i + 1])
            out.push_back(i);
    }
    return out;
}

double hausdorff(const std::vector<size_t>& a, const std::vector<size_t>& b, size_t w) {
    auto directed = [&](const std::vector<size_t>& from, const std::vector<size_t>& to) {
        double worst = 0;
        for (size_t i : from) {
            const double r1 = double(i / w), c1 = double(i % w);
            double best = std::numeric_limits<double>::infinity();
            for (size_t j : to) {
                const double dr = r1 - double(j / w), dc = c1 - double(j % w);
                best = std::min(best, dr * dr + dc * dc);
            }
            worst = std::max(worst, best);
        }
        return std::sqrt(worst);
    };
    return std::max(directed(a, b), directed(b, a));
}

}  // namespace

double bbox_iou(const BBox& a, const BBox& b) {
    const size_t r0 = std::max(a.r0, b.r0), c0 = std::max(a.c0, b.c0);
    const size_t r1 = std::min(a.r1, b.r1), c1 = std::min(a.c1, b.c1);
    double inter = 0;
    if (r1 + 1 > r0 && c1 + 1 > c0) inter = double(r1 - r0 + 1) * double(c1 - c0 + 1);
    const double area_a = double(a.r1 - a.r0 + 1) * double(a.c1 - a.c0 + 1);
    const double area_b = double(b.r1 - b.r0 + 1) * double(b.c1 - b.c0 + 1);
    return inter / (area_a + area_b - inter);
}

double fg_ari(const MaskSet& pred, const MaskSet& gt) {
    check_grids("fg_ari", pred, gt);
    std::map<int, size_t> gi, pi;
    std::vector<std::pair<size_t, size_t>> cells;  // (gt cluster, pred cluster)
    for (size_t i = 0; i < gt.labels.size(); ++i) {
        if (gt.labels[i] == 0) continue;
        auto g = gi.emplace(gt.labels[i], gi.size()).first->second;
        auto p = pi.emplace(pred.labels[i], pi.size()).first->second;
        cells.push_back({g, p});
    }
    if (cells.empty()) {
        std::cerr << "fg_ari: gt mask is all background, returning 0\n";
        return 0.0;
    }
    const size_t n = cells.size();
    std::vector<std::vector<size_t>> cont(gi.size(), std::vector<size_t>(pi.size(), 0));
    for (auto [g, p] : cells) ++cont[g][p];
    auto comb2 = [](size_t m) { return double(m) * double(m - 1) / 2.0; };
    double sum_ij = 0, sum_a = 0, sum_b = 0;
    std::vector<size_t> arow(gi.size(), 0), bcol(pi.size(), 0);
    for (size_t g = 0; g < gi.size(); ++g)
        for (size_t p = 0; p < pi.size(); ++p) {
            sum_ij += comb2(cont[g][p]);
            arow[g] += cont[g][p];
            bcol[p] += cont[g][p];
        }
    for (size_t m : arow) sum_a += comb2(m);
    for (size_t m : bcol) sum_b += comb2(m);
    const double expected = sum_a * sum_b / comb2(n);
    const double maximum = 0.5 * (sum_a + sum_b);
    if (maximum == expected) {
        // Both partitions trivial; identical structure counts as agreement.
        return (sum_ij == sum_a && sum_a == sum_b) ? 1.0 : 0.0;
    }
    return (sum_ij - expected) / (maximum - expected);
}

double mbo(const MaskSet& pred, const MaskSet& gt, const MetricOptions& opts) {
    check_grids("mbo", pred, gt);
    Matching m = match_instances(pred, gt, opts);
    double total = 0;
    for (size_t g = 0; g < m.gts.size(); ++g)
        if (m.assignment[g] >= 0) total += m.iou[g][size_t(m.assignment[g])];
    return total / double(m.gts.size());
}

double corloc(const MaskSet& pred, const MaskSet& gt, const MetricOptions& opts) {
    check_grids("corloc", pred, gt);
    Matching m = match_instances(pred, gt, opts);
    std::vector<BBox> pred_boxes;
    for (const auto& [label, cells] : m.preds) pred_boxes.push_back(bbox_of(cells, gt.w));
    size_t localized = 0;
    for (const auto& [label, cells] : m.gts) {
        const BBox gb = bbox_of(cells, gt.w);
        for (const BBox& pb : pred_boxes) {
            if (bbox_iou(gb, pb) > 0.5) {  // strictly greater
                ++localized;
                break;
            }
        }
    }
    return 100.0 * double(localized) / double(m.gts.size());
}

double mbhd(const MaskSet& pred, const MaskSet& gt, const MetricOptions& opts) {
    check_grids("mbhd", pred, gt);
    Matching m = match_instances(pred, gt, opts);
    const double diagonal = std::sqrt(double((gt.h - 1) * (gt.h - 1) + (gt.w - 1) * (gt.w - 1)));
    double total = 0;
    for (size_t g = 0; g < m.gts.size(); ++g) {
        if (m.assignment[g] < 0) {
            total += diagonal;
            continue;
        }
        auto gb = boundary_cells(m.gts[g].second, gt.h, gt.w);
        auto pb = boundary_cells(m.preds[size_t(m.assignment[g])].second, gt.h, gt.w);
        total += pb.empty() ? diagonal : hausdorff(gb, pb, gt.w);
    }
    return total / double(m.gts.size());
}

SceneMetrics score_masks(const MaskSet& pred, const MaskSet& gt, const MetricOptions& opts) {
    SceneMetrics s;
    bool any_fg = false;
    for (int label : gt.labels)
        if (label != 0) any_fg = true;
    if (!any_fg) {
        s.has_instances = false;
        return s;
    }
    s.fg_ari = fg_ari(pred, gt);
    s.mbo = mbo(pred, gt, opts);
    s.corloc = corloc(pred, gt, opts);
    s.mbhd = mbhd(pred, gt, opts);
    return s;
}

std::vector<int> hungarian_max(const std::vector<std::vector<double>>& value) {
    const size_t rows = value.size();
    if (rows == 0) return {};
    const size_t cols = value[0].size();
    const size_t n = std::max(rows, cols);
    // Kuhn-Munkres with potentials on the negated, zero-padded square matrix.
    auto cost = [&](size_t i, size_t j) -> double {
        return (i < rows && j < cols) ? -value[i][j] : 0.0;
    };
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(n + 1, 0), v(n + 1, 0);
    std::vector<size_t> p(n + 1, 0), way(n + 1, 0);
    for (size_t i = 1; i <= n; ++i) {
        p[0] = i;
        size_t j0 = 0;
        std::vector<double> minv(n + 1, inf);
        std::vector<char> used(n + 1, 0);
        do {
            used[j0] = 1;
            size_t i0 = p[j0], j1 = 0;
            double delta = inf;
            for (size_t j = 1; j <= n; ++j) {
                if (used[j]) continue;
                double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (size_t j = 0; j <= n; ++j) {
                if (used[j]) {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (p[j0] != 0);
        do {
            size_t j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        } while (j0);
    }
    std::vector<int> assignment(rows, -1);
    for (size_t j = 1; j <= n; ++j) {
        if (p[j] == 0) continue;
        const size_t row = p[j] - 1, col = j - 1;
        if (row < rows && col < cols) assignment[row] = int(col);
    }
    return assignment;
}

MetricReport::Row MetricReport::aggregate(const std::string& domain, const std::vector<SceneMetrics>& scenes) {
    Row row;
    row.domain = domain;
    std::vector<const SceneMetrics*> kept;
    for (const auto& s : scenes) {
        if (s.has_instances)
            kept.push_back(&s);
        else
            ++row.skipped;
    }
    row.n = kept.size();
    if (kept.empty()) return row;
    auto stats = [&](auto get, double& mean, double& sd) {
        double sum = 0;
        for (auto* s : kept) sum += get(*s);
        mean = sum / double(kept.size());
        double var = 0;
        for (auto* s : kept) {
            double d = get(*s) - mean;
            var += d * d;
        }
        sd = kept.size() > 1 ? std::sqrt(var / double(kept.size() - 1)) : 0.0;
    };
    stats([](const SceneMetrics& s) { return s.fg_ari; }, row.mean_fg_ari, row.std_fg_ari);
    stats([](const SceneMetrics& s) { return s.mbo; }, row.mean_mbo, row.std_mbo);
    stats([](const SceneMetrics& s) { return s.corloc; }, row.mean_corloc, row.std_corloc);
    stats([](const SceneMetrics& s) { return s.mbhd; }, row.mean_mbhd, row.std_mbhd);
    return row;
}

const MetricReport::Row* MetricReport::find(const std::string& domain) const {
    for (const auto& r : rows)
        if (r.domain == domain) return &r;
    return nullptr;
}

std::string MetricReport::to_csv() const {
    std::ostringstream os;
    os << "domain,metric,mean,std,n\n";
    for (const auto& r : rows) {
        auto line = [&](const char* metric, double mean, double sd) {
            os << r.domain << "," << metric << "," << mean << "," << sd << "," << r.n << "\n";
        };
        line("fg_ari", r.mean_fg_ari, r.std_fg_ari);
        line("mbo", r.mean_mbo, r.std_mbo);
        line("corloc", r.mean_corloc, r.std_corloc);
        line("mbhd", r.mean_mbhd, r.std_mbhd);
    }
    return os.str();
}

std::string MetricReport::to_table() const {
    std::ostringstream os;
    os << "domain        n   fg-ari        mbo           corloc          mbhd\n";
    char buf[160];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof buf, "%-12s %4zu  %.3f±%.3f  %.3f±%.3f  %6.2f±%5.2f  %.3f±%.3f\n",
                      r.domain.c_str(), r.n, r.mean_fg_ari, r.std_fg_ari, r.mean_mbo, r.std_mbo, r.mean_corloc,
                      r.std_corloc, r.mean_mbhd, r.std_mbhd);
        os << buf;
    }
    return os.str();
}

}  // namespace forla

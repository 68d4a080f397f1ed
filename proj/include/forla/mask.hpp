#pragma once

#include <cstddef>
#include <vector>

namespace forla {

// Hard segmentation: one integer label per grid cell, row-major. For ground
// truth, label 0 is background and 1..k are object instances.
struct MaskSet {
    size_t h = 0, w = 0;
    std::vector<int> labels;
    bool is_gt = false;

    size_t cells() const { return h * w; }
    int at(size_t r, size_t c) const { return labels[r * w + c]; }
};

}  // namespace forla

#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "muv/common.hpp"

namespace muv {

// Dense H x W x C image grid, row-major with interleaved channels.
struct Grid {
    int h = 0, w = 0, c = 0;
    std::vector<double> data;

    Grid() = default;
    Grid(int h_, int w_, int c_, double fill = 0.0)
        : h(h_), w(w_), c(c_), data(static_cast<size_t>(h_) * w_ * c_, fill) {}

    double& at(int y, int x, int ch) { return data[(static_cast<size_t>(y) * w + x) * c + ch]; }
    double at(int y, int x, int ch) const { return data[(static_cast<size_t>(y) * w + x) * c + ch]; }

    size_t size() const { return data.size(); }
    bool same_shape(const Grid& o) const { return h == o.h && w == o.w && c == o.c; }

    bool empty() const { return data.empty(); }
};

inline void require_same_shape(const Grid& a, const Grid& b, const char* what) {
    require(a.same_shape(b), ErrKind::Data,
            std::string(what) + ": shape mismatch (" + std::to_string(a.h) + "x" + std::to_string(a.w) +
                "x" + std::to_string(a.c) + " vs " + std::to_string(b.h) + "x" + std::to_string(b.w) +
                "x" + std::to_string(b.c) + ")");
}

inline double mean_abs_diff(const Grid& a, const Grid& b) {
    require_same_shape(a, b, "mean_abs_diff");
    double s = 0.0;
    for (size_t i = 0; i < a.size(); ++i) s += std::abs(a.data[i] - b.data[i]);
    return a.size() ? s / static_cast<double>(a.size()) : 0.0;
}

inline double max_abs_diff(const Grid& a, const Grid& b) {
    require_same_shape(a, b, "max_abs_diff");
    double m = 0.0;
    for (size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.data[i] - b.data[i]));
    return m;
}

}  // namespace muv

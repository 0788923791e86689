#pragma once

#include <Eigen/Core>

namespace muv {

struct RopeShape {
    int frames = 0, height = 0, width = 0;
    int tokens() const { return frames * height * width; }
};

// Per-token rotary phase table for the mixed-resolution MV+UV token layout.
//
// head_dim is split into three equal axis blocks (time, row, col), each with
// d_part = head_dim/6 complex pairs and per-axis geometric frequencies
// theta_j = 10000^(-j/d_part). MV tokens use temporal indices 0..frames-1; UV
// tokens continue at temporal index mv.frames. Both domains index their
// spatial axes from 0 at native grid sizes (extrapolation, no rescaling).
//
// Row layout: all MV tokens (frame-major, then row, then col) followed by all
// UV tokens. Column layout: d_part time phases | d_part row | d_part col.
Eigen::MatrixXd rope_3d(const RopeShape& mv, const RopeShape& uv, int head_dim);

}  // namespace muv

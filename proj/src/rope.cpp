#include "muv/rope.hpp"

#include <cmath>

#include "muv/common.hpp"

namespace muv {

Eigen::MatrixXd rope_3d(const RopeShape& mv, const RopeShape& uv, int head_dim) {
    require(head_dim % 6 == 0, ErrKind::Usage,
            "rope_3d: head_dim=" + std::to_string(head_dim) + " must be divisible by 6");
    const int d_part = head_dim / 6;

    Eigen::VectorXd theta(d_part);
    for (int j = 0; j < d_part; ++j)
        theta(j) = std::pow(10000.0, -static_cast<double>(j) / d_part);

    const int n = mv.tokens() + uv.tokens();
    Eigen::MatrixXd phases(n, 3 * d_part);

    auto fill = [&](int row0, const RopeShape& shape, int time_offset) {
        int r = row0;
        for (int f = 0; f < shape.frames; ++f)
            for (int y = 0; y < shape.height; ++y)
                for (int x = 0; x < shape.width; ++x, ++r)
                    for (int j = 0; j < d_part; ++j) {
                        phases(r, j) = (time_offset + f) * theta(j);
                        phases(r, d_part + j) = y * theta(j);
                        phases(r, 2 * d_part + j) = x * theta(j);
                    }
    };
    fill(0, mv, 0);
    fill(mv.tokens(), uv, mv.frames);
    return phases;
}

}  // namespace muv

#pragma once

#include <array>
#include <string>

#include "muv/grid.hpp"

namespace muv {

// Per-frame noise roles: denoise / condition / nonsense.
enum class FrameRole { DF, CF, NF };

enum class Task { img2tex, geo2mv };

struct TaskSpec {
    Task task = Task::img2tex;
    int cf_view_index = 0;  // img2tex only
};

// Discrete-step endpoints of the noise schedule; t = 1 - k/1000 with t=1 clean.
constexpr int kStepMax = 1000;
constexpr int kStepMin = 15;

double k_to_t(int k);

inline double t_condition() { return k_to_t(kStepMin); }  // 0.985
inline double t_nonsense() { return k_to_t(kStepMax); }   // 0

// Frame role assignment per task over [I1..I4, U].
std::array<FrameRole, 5> frame_roles(const TaskSpec& spec);

// The 5-frame sequence: 4 MV frames then the UV frame, values in [-1,1].
struct FrameSeq {
    std::array<Grid, 5> frames;
    std::array<FrameRole, 5> roles{};
    std::array<double, 5> timesteps{};
};

// Linear interpolation toward noise: frame_f = t_f*clean_f + (1-t_f)*noise_f,
// with t_f from the role (DF -> t_df, CF -> 0.985, NF -> 0).
FrameSeq noise_sequence(const std::array<Grid, 5>& clean, const std::array<FrameRole, 5>& roles,
                        double t_df, const std::array<Grid, 5>& noise);

// Per-frame regression target clean - noise (independent of t).
std::array<Grid, 5> velocity_target(const std::array<Grid, 5>& clean,
                                    const std::array<Grid, 5>& noise);

// Timestep weight favoring intermediate noise levels; zero at both endpoints.
inline double loss_weight(double t) { return 4.0 * t * (1.0 - t); }

// MSE over DF-frame elements only, scaled by loss_weight(t_df).
double flow_loss(const std::array<Grid, 5>& pred, const std::array<Grid, 5>& target,
                 const std::array<FrameRole, 5>& roles, double t_df);

// Time-grid warp t' = s*t / (1 + (s-1)*t); identity at s=1.
double flow_shift(double t, double s);

std::string role_name(FrameRole r);
std::string task_name(Task t);

}  // namespace muv

#include "muv/seqspace.hpp"

namespace muv {

double k_to_t(int k) {
    require(k >= 0 && k <= kStepMax, ErrKind::Usage,
            "k_to_t: k=" + std::to_string(k) + " outside [0," + std::to_string(kStepMax) + "]");
    return 1.0 - static_cast<double>(k) / kStepMax;
}

std::array<FrameRole, 5> frame_roles(const TaskSpec& spec) {
    std::array<FrameRole, 5> roles{};
    if (spec.task == Task::img2tex) {
        require(spec.cf_view_index >= 0 && spec.cf_view_index <= 3, ErrKind::Usage,
                "frame_roles: cf_view_index=" + std::to_string(spec.cf_view_index) +
                    " outside [0,3]");
        for (int i = 0; i < 4; ++i)
            roles[static_cast<size_t>(i)] = (i == spec.cf_view_index) ? FrameRole::CF : FrameRole::DF;
        roles[4] = FrameRole::DF;
    } else {
        for (int i = 0; i < 4; ++i) roles[static_cast<size_t>(i)] = FrameRole::DF;
        roles[4] = FrameRole::NF;
    }
    return roles;
}

namespace {

double role_timestep(FrameRole role, double t_df) {
    switch (role) {
        case FrameRole::DF: return t_df;
        case FrameRole::CF: return t_condition();
        case FrameRole::NF: return t_nonsense();
    }
    return t_df;
}

}  // namespace

FrameSeq noise_sequence(const std::array<Grid, 5>& clean, const std::array<FrameRole, 5>& roles,
                        double t_df, const std::array<Grid, 5>& noise) {
    require(t_df >= 0.0 && t_df <= 1.0, ErrKind::Usage, "noise_sequence: t_df outside [0,1]");
    FrameSeq seq;
    seq.roles = roles;
    for (size_t f = 0; f < 5; ++f) {
        require_same_shape(clean[f], noise[f], "noise_sequence clean/noise");
        double t = role_timestep(roles[f], t_df);
        seq.timesteps[f] = t;
        Grid g(clean[f].h, clean[f].w, clean[f].c);
        for (size_t i = 0; i < g.size(); ++i)
            g.data[i] = t * clean[f].data[i] + (1.0 - t) * noise[f].data[i];
        seq.frames[f] = std::move(g);
    }
    return seq;
}

std::array<Grid, 5> velocity_target(const std::array<Grid, 5>& clean,
                                    const std::array<Grid, 5>& noise) {
    std::array<Grid, 5> out;
    for (size_t f = 0; f < 5; ++f) {
        require_same_shape(clean[f], noise[f], "velocity_target clean/noise");
        Grid g(clean[f].h, clean[f].w, clean[f].c);
        for (size_t i = 0; i < g.size(); ++i) g.data[i] = clean[f].data[i] - noise[f].data[i];
        out[f] = std::move(g);
    }
    return out;
}

double flow_loss(const std::array<Grid, 5>& pred, const std::array<Grid, 5>& target,
                 const std::array<FrameRole, 5>& roles, double t_df) {
    double sum = 0.0;
    size_t count = 0;
    for (size_t f = 0; f < 5; ++f) {
        require_same_shape(pred[f], target[f], "flow_loss pred/target");
        if (roles[f] != FrameRole::DF) continue;
        for (size_t i = 0; i < pred[f].size(); ++i) {
            double d = pred[f].data[i] - target[f].data[i];
            sum += d * d;
        }
        count += pred[f].size();
    }
    if (count == 0) return 0.0;
    return loss_weight(t_df) * sum / static_cast<double>(count);
}

double flow_shift(double t, double s) {
    return s * t / (1.0 + (s - 1.0) * t);
}

std::string role_name(FrameRole r) {
    switch (r) {
        case FrameRole::DF: return "DF";
        case FrameRole::CF: return "CF";
        case FrameRole::NF: return "NF";
    }
    return "?";
}

std::string task_name(Task t) { return t == Task::img2tex ? "img2tex" : "geo2mv"; }

}  // namespace muv

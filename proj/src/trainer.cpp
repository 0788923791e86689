#include "muv/trainer.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <thread>

namespace muv {

double ema_gamma_from_std(double std_rel) {
    require(std_rel > 0 && std_rel < 0.29, ErrKind::Usage,
            "ema std must be in (0, 0.29); got " + std::to_string(std_rel));
    // sigma(gamma) is monotone decreasing on gamma > 0; bisect.
    auto sigma2 = [](double g) { return (g + 1) / ((g + 2) * (g + 2) * (g + 3)); };
    double lo = 1e-9, hi = 1e9;
    const double target = std_rel * std_rel;
    for (int i = 0; i < 200; ++i) {
        double mid = 0.5 * (lo + hi);
        if (sigma2(mid) > target) lo = mid;
        else hi = mid;
    }
    return 0.5 * (lo + hi);
}

double ema_beta(double gamma, int64_t step) {
    return std::pow(1.0 - 1.0 / static_cast<double>(step), gamma + 1.0);
}

Trainer::Trainer(MuvModel& model, const TrainConfig& cfg, const Dataset& data)
    : model_(model), cfg_(cfg), data_(data), rng_(cfg.seed) {
    require(cfg_.mode == "scratch" || cfg_.mode == "finetune", ErrKind::Usage,
            "train mode must be scratch or finetune");
    require(cfg_.task_mix_img2tex >= 0.0 && cfg_.task_mix_img2tex <= 1.0, ErrKind::Usage,
            "task_mix_img2tex must be a probability");
    ema_gamma_ = ema_gamma_from_std(cfg_.ema_std);
    if (cfg_.mode == "finetune") model_.set_trainable(GROUP_MV_BASE, false);

    for (const auto& p : model_.params()) {
        m_.emplace_back(MuvModel::Mat::Zero(p.w.rows(), p.w.cols()));
        v_.emplace_back(MuvModel::Mat::Zero(p.w.rows(), p.w.cols()));
        ema_.push_back(p.w);
    }
    for (int i = 0; i < cfg_.batch * cfg_.accum; ++i)
        sample_grads_.push_back(model_.make_grad_buffer());
}

double Trainer::lr_at(int step) const {
    if (step <= cfg_.warmup) return cfg_.lr * step / cfg_.warmup;
    if (step >= cfg_.total_steps) return 0.0;
    double u = static_cast<double>(step - cfg_.warmup) / (cfg_.total_steps - cfg_.warmup);
    return cfg_.lr * 0.5 * (1.0 + std::cos(M_PI * u));
}

namespace {

Grid rescale_01_to_pm1(const Grid& g) {
    Grid out(g.h, g.w, g.c);
    for (size_t i = 0; i < g.size(); ++i) out.data[i] = 2.0 * g.data[i] - 1.0;
    return out;
}

Grid noise_grid(Rng& rng, int h, int w, int c) {
    Grid g(h, w, c);
    for (auto& v : g.data) v = rng.normal();
    return g;
}

}  // namespace

void Trainer::assemble_clean(const AssetBundle& bundle, Task task, std::array<Grid, 5>& clean,
                             GeoConditioning& geo) const {
    // img2tex trains on lighting-free views + albedo atlas; geo2mv trains on
    // shaded views with the UV slot unused (nonsense frame).
    for (int f = 0; f < 4; ++f) {
        const ViewBuffers& vb = bundle.views[static_cast<size_t>(f)];
        clean[static_cast<size_t>(f)] =
            rescale_01_to_pm1(task == Task::img2tex ? vb.albedo : vb.shaded);
    }
    if (task == Task::img2tex) {
        clean[4] = rescale_01_to_pm1(bundle.asset.albedo_atlas);
    } else {
        const Grid& proto = bundle.uvgeo.position;
        clean[4] = Grid(proto.h, proto.w, 3);  // pure-noise nonsense frame
    }
    geo = make_geo_conditioning(bundle.views, bundle.uvgeo);
}

TrainBatch Trainer::build_batch() {
    TrainBatch batch;
    const int n = cfg_.batch * cfg_.accum;
    const bool uv_only = model_.config().uv_only;
    for (int i = 0; i < n; ++i) {
        Task task = Task::img2tex;
        if (cfg_.stage >= 2 && !uv_only && cfg_.mv_source != "none")
            task = rng_.uniform() < cfg_.task_mix_img2tex ? Task::img2tex : Task::geo2mv;

        const std::vector<int>* pool = nullptr;
        if (task == Task::img2tex) {
            pool = &data_.pool_tex;
        } else if (cfg_.mv_source == "mv") {
            pool = &data_.pool_mv;
        } else {  // tex-split: geo2mv draws from the tex pool too
            pool = &data_.pool_tex;
        }
        require(!pool->empty(), ErrKind::Data,
                "build_batch: empty asset pool for task " + task_name(task));
        int idx = (*pool)[rng_.below(pool->size())];
        const AssetBundle& bundle = data_.bundles[static_cast<size_t>(idx)];

        TaskSpec spec;
        spec.task = task;
        spec.cf_view_index = static_cast<int>(rng_.below(4));
        std::array<FrameRole, 5> roles = frame_roles(spec);
        if (uv_only) {
            // UV-only ablation: the sequence degenerates to the UV frame.
            roles = {FrameRole::NF, FrameRole::NF, FrameRole::NF, FrameRole::NF, FrameRole::DF};
        }

        double t_df = flow_shift(rng_.uniform(), cfg_.flow_shift);

        std::array<Grid, 5> clean;
        GeoConditioning geo;
        assemble_clean(bundle, task, clean, geo);

        std::array<Grid, 5> noise;
        for (int f = 0; f < 5; ++f)
            noise[static_cast<size_t>(f)] =
                noise_grid(rng_, clean[static_cast<size_t>(f)].h, clean[static_cast<size_t>(f)].w, 3);

        FrameSeq seq = noise_sequence(clean, roles, t_df, noise);

        NetSample sample;
        sample.frames = std::move(seq.frames);
        sample.timesteps = seq.timesteps;
        sample.geo = std::move(geo);
        sample.label = data_.label_id(bundle.asset.label);

        batch.samples.push_back(std::move(sample));
        batch.targets.push_back(velocity_target(clean, noise));
        batch.roles.push_back(roles);
        batch.t_df.push_back(t_df);
        batch.tasks.push_back(task);
    }
    return batch;
}

StepStats Trainer::train_step(const TrainBatch& batch) {
    const size_t n = batch.samples.size();
    require(n > 0, ErrKind::Usage, "train_step: empty batch");
    require(n <= sample_grads_.size(), ErrKind::Usage, "train_step: batch larger than configured");

    std::vector<double> losses(n, 0.0);
    auto run_sample = [&](size_t i) {
        for (auto& g : sample_grads_[i]) g.setZero();
        losses[i] = model_.loss_and_grad(batch.samples[i], batch.targets[i], batch.roles[i],
                                         batch.t_df[i], &sample_grads_[i]);
    };
    const int workers = std::max(1, std::min<int>(cfg_.workers, static_cast<int>(n)));
    if (workers == 1) {
        for (size_t i = 0; i < n; ++i) run_sample(i);
    } else {
        std::vector<std::thread> pool;
        std::atomic<size_t> next{0};
        for (int w = 0; w < workers; ++w)
            pool.emplace_back([&] {
                for (size_t i = next.fetch_add(1); i < n; i = next.fetch_add(1)) run_sample(i);
            });
        for (auto& t : pool) t.join();
    }

    StepStats stats;
    stats.step = step_ + 1;
    for (size_t i = 0; i < n; ++i) stats.loss += losses[i];
    stats.loss /= static_cast<double>(n);
    for (Task t : batch.tasks) (t == Task::img2tex ? stats.n_img2tex : stats.n_geo2mv)++;

    if (!std::isfinite(stats.loss)) {
        stats.skipped = true;  // keep previous weights
        stats.lr = lr_at(stats.step);
        return stats;
    }

    ++step_;
    const double lr = lr_at(step_);
    stats.lr = lr;
    const float inv_n = 1.0f / static_cast<float>(n);
    const double bc1 = 1.0 - std::pow(cfg_.beta1, step_);
    const double bc2 = 1.0 - std::pow(cfg_.beta2, step_);
    const float ema_b = static_cast<float>(ema_beta(ema_gamma_, step_));

    auto& params = model_.params();
    for (size_t p = 0; p < params.size(); ++p) {
        auto& P = params[p];
        if (P.trainable) {
            // Merge per-sample grads in index order (bitwise deterministic for
            // any worker count), then one AdamW update.
            MuvModel::Mat g = sample_grads_[0][p];
            for (size_t i = 1; i < n; ++i) g += sample_grads_[i][p];
            g *= inv_n;
            auto& M = m_[p];
            auto& V = v_[p];
            M = static_cast<float>(cfg_.beta1) * M + static_cast<float>(1.0 - cfg_.beta1) * g;
            V = static_cast<float>(cfg_.beta2) * V.array().matrix() +
                static_cast<float>(1.0 - cfg_.beta2) * g.array().square().matrix();
            const bool decay = P.w.rows() > 1;  // skip biases / 1-row tables
            for (int r = 0; r < P.w.rows(); ++r)
                for (int c = 0; c < P.w.cols(); ++c) {
                    double mhat = static_cast<double>(M(r, c)) / bc1;
                    double vhat = static_cast<double>(V(r, c)) / bc2;
                    double upd = mhat / (std::sqrt(vhat) + 1e-8);
                    if (decay && cfg_.weight_decay > 0)
                        upd += cfg_.weight_decay * static_cast<double>(P.w(r, c));
                    P.w(r, c) -= static_cast<float>(lr * upd);
                }
        }
        ema_[p] = ema_b * ema_[p] + (1.0f - ema_b) * P.w;
    }
    return stats;
}

void Trainer::load_ema_into(MuvModel& model) const {
    auto& params = model.params();
    require(params.size() == ema_.size(), ErrKind::Data, "load_ema_into: parameter count mismatch");
    for (size_t i = 0; i < params.size(); ++i) params[i].w = ema_[i];
}

// ---- checkpoint I/O ----------------------------------------------------------

namespace {
constexpr char kMagic[8] = {'M', 'U', 'V', 'C', 'K', 'P', 'T', '1'};

template <typename T>
void write_pod(std::ofstream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <typename T>
void read_pod(std::ifstream& is, T& v) {
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
}
}  // namespace

void checkpoint_write(const std::string& path,
                      const std::vector<std::pair<std::string, CheckpointEntry>>& entries) {
    std::ofstream os(path, std::ios::binary);
    require(os.good(), ErrKind::Data, "checkpoint: cannot write " + path);
    os.write(kMagic, 8);
    write_pod(os, uint32_t{1});
    write_pod(os, static_cast<uint32_t>(entries.size()));
    for (const auto& [name, e] : entries) {
        write_pod(os, static_cast<uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        write_pod(os, e.kind);
        if (e.kind == 0) {
            write_pod(os, e.rows);
            write_pod(os, e.cols);
            os.write(reinterpret_cast<const char*>(e.data.data()),
                     static_cast<std::streamsize>(e.data.size() * sizeof(float)));
        } else {
            write_pod(os, static_cast<uint64_t>(e.text.size()));
            os.write(e.text.data(), static_cast<std::streamsize>(e.text.size()));
        }
    }
    require(os.good(), ErrKind::Data, "checkpoint: write failed for " + path);
}

std::vector<std::pair<std::string, CheckpointEntry>> checkpoint_read(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    require(is.good(), ErrKind::Data, "checkpoint: cannot open " + path);
    char magic[8];
    is.read(magic, 8);
    require(is.good() && std::memcmp(magic, kMagic, 8) == 0, ErrKind::Data,
            "checkpoint: bad magic in " + path);
    uint32_t version = 0, count = 0;
    read_pod(is, version);
    require(version == 1, ErrKind::Data, "checkpoint: unsupported version");
    read_pod(is, count);
    std::vector<std::pair<std::string, CheckpointEntry>> entries;
    for (uint32_t i = 0; i < count; ++i) {
        uint32_t name_len = 0;
        read_pod(is, name_len);
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        CheckpointEntry e;
        read_pod(is, e.kind);
        if (e.kind == 0) {
            read_pod(is, e.rows);
            read_pod(is, e.cols);
            e.data.resize(static_cast<size_t>(e.rows) * e.cols);
            is.read(reinterpret_cast<char*>(e.data.data()),
                    static_cast<std::streamsize>(e.data.size() * sizeof(float)));
        } else {
            uint64_t size = 0;
            read_pod(is, size);
            e.text.resize(size);
            is.read(e.text.data(), static_cast<std::streamsize>(size));
        }
        require(is.good(), ErrKind::Data, "checkpoint: truncated entry '" + name + "'");
        entries.emplace_back(std::move(name), std::move(e));
    }
    return entries;
}

namespace {

CheckpointEntry mat_entry(const MuvModel::Mat& m) {
    CheckpointEntry e;
    e.kind = 0;
    e.rows = static_cast<uint32_t>(m.rows());
    e.cols = static_cast<uint32_t>(m.cols());
    e.data.resize(static_cast<size_t>(m.rows()) * m.cols());
    for (int r = 0; r < m.rows(); ++r)
        for (int c = 0; c < m.cols(); ++c)
            e.data[static_cast<size_t>(r) * m.cols() + c] = m(r, c);
    return e;
}

CheckpointEntry text_entry(const std::string& s) {
    CheckpointEntry e;
    e.kind = 1;
    e.text = s;
    return e;
}

void entry_to_mat(const CheckpointEntry& e, MuvModel::Mat& m, const std::string& name) {
    require(e.kind == 0, ErrKind::Data, "checkpoint entry '" + name + "' is not a matrix");
    require(static_cast<int>(e.rows) == m.rows() && static_cast<int>(e.cols) == m.cols(),
            ErrKind::Data,
            "checkpoint entry '" + name + "': shape " + std::to_string(e.rows) + "x" +
                std::to_string(e.cols) + " does not match model " + std::to_string(m.rows()) + "x" +
                std::to_string(m.cols()));
    for (int r = 0; r < m.rows(); ++r)
        for (int c = 0; c < m.cols(); ++c)
            m(r, c) = e.data[static_cast<size_t>(r) * m.cols() + c];
}

std::string config_text(const ModelConfig& cfg) {
    std::ostringstream os;
    for (const auto& [k, v] : cfg.to_kv()) os << k << "=" << v << "\n";
    return os.str();
}

}  // namespace

void Trainer::save_checkpoint(const std::string& path, const std::vector<std::string>& labels) const {
    std::vector<std::pair<std::string, CheckpointEntry>> entries;
    entries.emplace_back("model_config", text_entry(config_text(model_.config())));
    std::ostringstream lb;
    for (const auto& l : labels) lb << l << "\n";
    entries.emplace_back("labels", text_entry(lb.str()));
    entries.emplace_back("step", text_entry(std::to_string(step_)));
    entries.emplace_back("rng", text_entry(rng_.serialize()));
    const auto& params = model_.params();
    for (size_t i = 0; i < params.size(); ++i) {
        entries.emplace_back("param/" + params[i].name, mat_entry(params[i].w));
        entries.emplace_back("ema/" + params[i].name, mat_entry(ema_[i]));
        entries.emplace_back("m/" + params[i].name, mat_entry(m_[i]));
        entries.emplace_back("v/" + params[i].name, mat_entry(v_[i]));
    }
    checkpoint_write(path, entries);
}

void Trainer::load_checkpoint(const std::string& path) {
    auto entries = checkpoint_read(path);
    std::map<std::string, const CheckpointEntry*> by_name;
    for (const auto& [name, e] : entries) by_name[name] = &e;

    auto need = [&](const std::string& name) -> const CheckpointEntry& {
        auto it = by_name.find(name);
        require(it != by_name.end(), ErrKind::Data, "checkpoint: missing entry '" + name + "'");
        return *it->second;
    };

    // Config must match the live model; report the differing lines.
    std::string want = config_text(model_.config());
    std::string got = need("model_config").text;
    if (want != got) {
        std::ostringstream diff;
        diff << "checkpoint model config mismatch:\n";
        std::istringstream a(got), b(want);
        std::string la, lb;
        while (std::getline(a, la)) {
            std::getline(b, lb);
            if (la != lb) diff << "  checkpoint: " << la << "  model: " << lb << "\n";
        }
        throw Error(ErrKind::Data, diff.str());
    }

    step_ = std::stoi(need("step").text);
    rng_.deserialize(need("rng").text);
    auto& params = model_.params();
    for (size_t i = 0; i < params.size(); ++i) {
        entry_to_mat(need("param/" + params[i].name), params[i].w, params[i].name);
        entry_to_mat(need("ema/" + params[i].name), ema_[i], params[i].name);
        entry_to_mat(need("m/" + params[i].name), m_[i], params[i].name);
        entry_to_mat(need("v/" + params[i].name), v_[i], params[i].name);
    }
}

ModelConfig checkpoint_model_config(const std::string& path, std::vector<std::string>* labels) {
    auto entries = checkpoint_read(path);
    std::map<std::string, std::string> kv;
    bool found = false;
    for (const auto& [name, e] : entries) {
        if (name == "model_config") {
            std::istringstream is(e.text);
            std::string line;
            while (std::getline(is, line)) {
                auto eq = line.find('=');
                if (eq != std::string::npos) kv[line.substr(0, eq)] = line.substr(eq + 1);
            }
            found = true;
        } else if (name == "labels" && labels) {
            labels->clear();
            std::istringstream is(e.text);
            std::string line;
            while (std::getline(is, line))
                if (!line.empty()) labels->push_back(line);
        }
    }
    require(found, ErrKind::Data, "checkpoint: missing model_config entry");
    return ModelConfig::from_kv(kv);
}

void load_weights(MuvModel& model, const std::string& path, bool use_ema) {
    auto entries = checkpoint_read(path);
    std::map<std::string, const CheckpointEntry*> by_name;
    for (const auto& [name, e] : entries) by_name[name] = &e;
    const std::string prefix = use_ema ? "ema/" : "param/";
    for (auto& p : model.params()) {
        auto it = by_name.find(prefix + p.name);
        require(it != by_name.end(), ErrKind::Data,
                "checkpoint: missing entry '" + prefix + p.name + "'");
        entry_to_mat(*it->second, p.w, p.name);
    }
}

}  // namespace muv

#include "muv/runcfg.hpp"

#include <fstream>

namespace muv {

RunConfig::RunConfig() {
    // Data / generation.
    values_["data.root"] = "data";
    values_["data.split_tex"] = "0.6";
    values_["data.split_mv"] = "0.25";
    values_["data.split_eval"] = "0.15";
    // Model (defaults mirror ModelConfig).
    for (const auto& [k, v] : ModelConfig().to_kv()) values_[k] = v;
    // Training.
    values_["train.lr"] = "1e-4";
    values_["train.beta1"] = "0.9";
    values_["train.beta2"] = "0.999";
    values_["train.weight_decay"] = "0.01";
    values_["train.warmup"] = "200";
    values_["train.total_steps"] = "2000";
    values_["train.ema_std"] = "0.05";
    values_["train.batch"] = "4";
    values_["train.accum"] = "1";
    values_["train.task_mix_img2tex"] = "0.6";
    values_["train.seed"] = "0";
    values_["train.mode"] = "scratch";
    values_["train.stage"] = "2";
    values_["train.flow_shift"] = "1.0";
    values_["train.mv_source"] = "mv";
    values_["train.log_every"] = "25";
    values_["train.ckpt_every"] = "500";
    values_["train.workers"] = "2";
    // Sampling / evaluation.
    values_["sample.steps"] = "30";
    values_["sample.seed"] = "0";
    values_["sample.cf_view"] = "0";
    values_["sample.flow_shift"] = "1.0";
    values_["sample.weights"] = "ema";
    // Baking oracle.
    values_["bake.eps_depth"] = "0.01";
    values_["bake.cos_max"] = "-0.2";
}

void RunConfig::load_file(const std::string& path) {
    std::ifstream is(path);
    require(is.good(), ErrKind::Usage, "config: cannot open " + path);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        auto eq = line.find('=');
        require(eq != std::string::npos, ErrKind::Usage,
                "config " + path + ":" + std::to_string(lineno) + ": expected key=value");
        set(line.substr(0, eq), line.substr(eq + 1));
    }
}

void RunConfig::set(const std::string& key, const std::string& value) {
    auto it = values_.find(key);
    require(it != values_.end(), ErrKind::Usage, "config: unknown key '" + key + "'");
    it->second = value;
}

void RunConfig::apply_preset(const std::string& name) {
    for (const auto& [k, v] : preset_values(name)) set(k, v);
}

const std::string& RunConfig::gets(const std::string& key) const {
    auto it = values_.find(key);
    require(it != values_.end(), ErrKind::Usage, "config: unknown key '" + key + "'");
    return it->second;
}

int RunConfig::geti(const std::string& key) const { return std::stoi(gets(key)); }
double RunConfig::getd(const std::string& key) const { return std::stod(gets(key)); }
bool RunConfig::getb(const std::string& key) const {
    const std::string& v = gets(key);
    return v != "0" && v != "false" && v != "off";
}

void RunConfig::echo(const std::string& path) const {
    std::ofstream os(path);
    require(os.good(), ErrKind::Data, "config: cannot write " + path);
    for (const auto& [k, v] : values_) os << k << "=" << v << "\n";
}

ModelConfig RunConfig::model_config() const {
    std::map<std::string, std::string> kv;
    for (const auto& [k, v] : values_)
        if (k.rfind("model.", 0) == 0) kv[k] = v;
    return ModelConfig::from_kv(kv);
}

std::vector<std::string> RunConfig::preset_names() {
    return {"full", "no-geo", "no-decouple", "uv-only", "mix-3d-only", "mix-split-3d", "mix-hybrid"};
}

std::map<std::string, std::string> RunConfig::preset_values(const std::string& name) {
    if (name == "full") return {};
    if (name == "no-geo") return {{"model.geo_attention", "0"}};
    if (name == "no-decouple") return {{"model.decoupled", "0"}};
    if (name == "uv-only") return {{"model.uv_only", "1"}};
    if (name == "mix-3d-only")
        return {{"train.task_mix_img2tex", "1.0"}, {"train.mv_source", "none"}};
    if (name == "mix-split-3d") return {{"train.mv_source", "tex-split"}};
    if (name == "mix-hybrid") return {{"train.mv_source", "mv"}};
    throw Error(ErrKind::Usage, "unknown preset '" + name + "'");
}

}  // namespace muv

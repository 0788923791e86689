#include "muv/muvnet.hpp"

#include "muv/geomesh.hpp"

namespace muv {

std::map<std::string, std::string> ModelConfig::to_kv() const {
    std::map<std::string, std::string> kv;
    kv["model.patch"] = std::to_string(patch);
    kv["model.dim"] = std::to_string(dim);
    kv["model.heads"] = std::to_string(heads);
    kv["model.head_dim"] = std::to_string(head_dim);
    kv["model.depth"] = std::to_string(depth);
    kv["model.lora_rank"] = std::to_string(lora_rank);
    kv["model.lora_alpha"] = std::to_string(lora_alpha);
    kv["model.h_mv"] = std::to_string(h_mv);
    kv["model.w_mv"] = std::to_string(w_mv);
    kv["model.h_uv"] = std::to_string(h_uv);
    kv["model.w_uv"] = std::to_string(w_uv);
    kv["model.label_vocab"] = std::to_string(label_vocab);
    kv["model.geo_attention"] = geo_attention ? "1" : "0";
    kv["model.decoupled"] = decoupled ? "1" : "0";
    kv["model.uv_only"] = uv_only ? "1" : "0";
    return kv;
}

ModelConfig ModelConfig::from_kv(const std::map<std::string, std::string>& kv) {
    ModelConfig c;
    auto get = [&](const char* key, auto& out) {
        auto it = kv.find(key);
        if (it == kv.end()) return;
        if constexpr (std::is_same_v<std::decay_t<decltype(out)>, bool>) out = it->second != "0";
        else if constexpr (std::is_same_v<std::decay_t<decltype(out)>, double>) out = std::stod(it->second);
        else out = std::stoi(it->second);
    };
    get("model.patch", c.patch);
    get("model.dim", c.dim);
    get("model.heads", c.heads);
    get("model.head_dim", c.head_dim);
    get("model.depth", c.depth);
    get("model.lora_rank", c.lora_rank);
    get("model.lora_alpha", c.lora_alpha);
    get("model.h_mv", c.h_mv);
    get("model.w_mv", c.w_mv);
    get("model.h_uv", c.h_uv);
    get("model.w_uv", c.w_uv);
    get("model.label_vocab", c.label_vocab);
    get("model.geo_attention", c.geo_attention);
    get("model.decoupled", c.decoupled);
    get("model.uv_only", c.uv_only);
    return c;
}

GeoConditioning make_geo_conditioning(const std::vector<ViewBuffers>& views,
                                      const UVGeometryMaps& uvgeo) {
    require(views.size() == 4, ErrKind::Data, "make_geo_conditioning: expected 4 views");
    GeoConditioning geo;
    for (int f = 0; f < 4; ++f) {
        const ViewBuffers& vb = views[static_cast<size_t>(f)];
        Grid g(vb.position.h, vb.position.w, 7);
        for (int i = 0; i < g.h; ++i)
            for (int j = 0; j < g.w; ++j) {
                for (int ch = 0; ch < 3; ++ch) {
                    g.at(i, j, ch) = vb.position.at(i, j, ch);
                    g.at(i, j, 3 + ch) = vb.normal.at(i, j, ch);
                }
                g.at(i, j, 6) = vb.validity.at(i, j, 0);
            }
        geo.frames[static_cast<size_t>(f)] = std::move(g);
    }
    Grid g(uvgeo.position.h, uvgeo.position.w, 7);
    for (int i = 0; i < g.h; ++i)
        for (int j = 0; j < g.w; ++j) {
            for (int ch = 0; ch < 3; ++ch) {
                g.at(i, j, ch) = uvgeo.position.at(i, j, ch);
                g.at(i, j, 3 + ch) = uvgeo.normal.at(i, j, ch);
            }
            g.at(i, j, 6) = uvgeo.validity.at(i, j, 0);
        }
    geo.frames[4] = std::move(g);
    return geo;
}

}  // namespace muv

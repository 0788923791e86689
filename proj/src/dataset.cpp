#include "muv/dataset.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <thread>

namespace fs = std::filesystem;

namespace muv {

void write_manifest(const std::string& path, const Manifest& m) {
    std::ofstream os(path);
    require(os.good(), ErrKind::Data, "write_manifest: cannot write " + path);
    os << "muvmanifest 1\n";
    for (const auto& r : m.records)
        os << r.id << " " << r.split << " " << r.label << " " << r.kind << " " << r.seed << "\n";
}

Manifest read_manifest(const std::string& path) {
    std::ifstream is(path);
    require(is.good(), ErrKind::Data, "read_manifest: cannot open " + path);
    std::string header;
    std::getline(is, header);
    require(header.rfind("muvmanifest", 0) == 0, ErrKind::Data, "read_manifest: bad header in " + path);
    Manifest m;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        AssetRecord r;
        ls >> r.id >> r.split >> r.label >> r.kind >> r.seed;
        require(!ls.fail(), ErrKind::Data, "read_manifest: malformed line '" + line + "'");
        m.records.push_back(std::move(r));
    }
    return m;
}

std::vector<std::string> default_texture_pool() {
    return {
        "checker:white:black",     "checker:red:blue",       "checker:yellow:purple",
        "stripes:green:yellow",    "stripes:red:white",      "stripes:blue:orange:white",
        "gradient:red:blue",       "gradient:black:white",   "gradient:teal:orange:purple",
        "voronoi-noise:red:green", "voronoi-noise:blue:yellow", "voronoi-noise:cyan:magenta:black",
    };
}

void split_counts(int count, double f_tex, double f_mv, int& n_tex, int& n_mv, int& n_eval) {
    n_tex = static_cast<int>(std::floor(count * f_tex + 0.5));
    n_mv = static_cast<int>(std::floor(count * f_mv + 0.5));
    n_tex = std::min(n_tex, count);
    n_mv = std::min(n_mv, count - n_tex);
    n_eval = count - n_tex - n_mv;
}

Manifest generate_dataset(const GenDataParams& params) {
    require(params.count >= 1, ErrKind::Usage, "gen-data: count must be >= 1");
    fs::path out(params.out_dir);
    if (fs::exists(out) && !fs::is_empty(out)) {
        require(params.force, ErrKind::Usage,
                "gen-data: output dir '" + params.out_dir + "' is not empty (pass --force to overwrite)");
    }
    fs::create_directories(out);

    std::vector<std::string> kinds = params.kinds;
    if (kinds.empty()) kinds = {"cube", "uvsphere", "torus"};
    std::vector<std::string> textures = params.textures;
    if (textures.empty()) textures = default_texture_pool();
    for (const auto& t : textures) texture_color(t, 0.5, 0.5);  // validate specs up front

    int n_tex = 0, n_mv = 0, n_eval = 0;
    split_counts(params.count, params.split_tex, params.split_mv, n_tex, n_mv, n_eval);

    // Texture index wraps within the train-tex pool size so held-out labels
    // are always trained on.
    const int tex_pool = std::max(1, std::min<int>(static_cast<int>(textures.size()), std::max(n_tex, 1)));

    Manifest m;
    for (int i = 0; i < params.count; ++i) {
        AssetRecord r;
        char idbuf[32];
        std::snprintf(idbuf, sizeof(idbuf), "asset_%04d", i);
        r.id = idbuf;
        r.split = i < n_tex ? "train-tex" : (i < n_tex + n_mv ? "train-mv" : "eval");
        r.kind = kinds[static_cast<size_t>(i) % kinds.size()];
        r.label = textures[static_cast<size_t>(i % tex_pool)];
        r.seed = params.seed * 1000003ULL + static_cast<uint64_t>(i);
        m.records.push_back(std::move(r));
    }

    CameraRig rig = make_default_rig();
    auto build_one = [&](const AssetRecord& r) {
        TexturedAsset asset = make_primitive(r.kind, r.label, r.seed, params.uv_res);
        std::string dir = (out / r.id).string();
        save_asset(dir, asset);
        cache_buffers(dir, asset, rig, params.mv_res, params.uv_res);
    };

    const int workers = std::max(1, params.workers);
    if (workers == 1) {
        for (const auto& r : m.records) build_one(r);
    } else {
        std::vector<std::thread> pool;
        std::atomic<size_t> next{0};
        for (int w = 0; w < workers; ++w)
            pool.emplace_back([&] {
                for (size_t i = next.fetch_add(1); i < m.records.size(); i = next.fetch_add(1))
                    build_one(m.records[i]);
            });
        for (auto& t : pool) t.join();
    }

    write_manifest((out / "manifest.txt").string(), m);
    return m;
}

int Dataset::label_id(const std::string& label) const {
    auto it = label_ids.find(label);
    require(it != label_ids.end(), ErrKind::Data, "label '" + label + "' not in dataset vocabulary");
    return it->second;
}

Dataset load_dataset(const std::string& root) {
    Manifest m = read_manifest(root + "/manifest.txt");
    Dataset ds;
    ds.records = m.records;
    std::set<std::string> label_set;
    for (size_t i = 0; i < ds.records.size(); ++i) {
        const auto& r = ds.records[i];
        ds.bundles.push_back(load_bundle(root + "/" + r.id));
        label_set.insert(r.label);
        if (r.split == "train-tex") ds.pool_tex.push_back(static_cast<int>(i));
        else if (r.split == "train-mv") ds.pool_mv.push_back(static_cast<int>(i));
        else if (r.split == "eval") ds.pool_eval.push_back(static_cast<int>(i));
        else throw Error(ErrKind::Data, "dataset: unknown split '" + r.split + "'");
    }
    ds.labels.assign(label_set.begin(), label_set.end());
    for (size_t i = 0; i < ds.labels.size(); ++i) ds.label_ids[ds.labels[i]] = static_cast<int>(i);
    return ds;
}

}  // namespace muv

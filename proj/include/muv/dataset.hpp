#pragma once

#include <map>
#include <string>
#include <vector>

#include "muv/geomesh.hpp"

namespace muv {

struct AssetRecord {
    std::string id;
    std::string split;  // train-tex | train-mv | eval
    std::string label;
    std::string kind;
    uint64_t seed = 0;
};

struct Manifest {
    std::vector<AssetRecord> records;
};

void write_manifest(const std::string& path, const Manifest& m);
Manifest read_manifest(const std::string& path);

struct GenDataParams {
    std::string out_dir;
    int count = 16;
    uint64_t seed = 0;
    std::vector<std::string> kinds;     // default: all three
    std::vector<std::string> textures;  // default: built-in pool
    double split_tex = 0.6, split_mv = 0.25, split_eval = 0.15;
    int mv_res = 32, uv_res = 64;
    bool force = false;
    int workers = 2;
};

// Built-in texture pool crossing all families with a few color pairs.
std::vector<std::string> default_texture_pool();

// Split sizes with round-half-up on tex and mv, remainder to eval
// (count=16 at 0.6/0.25/0.15 -> 10/4/2).
void split_counts(int count, double f_tex, double f_mv, int& n_tex, int& n_mv, int& n_eval);

// Generates `count` assets + cached buffers + manifest. Deterministic in
// (params); asset i uses kind[i % nk], texture[i % min(nt, n_tex)], so every
// eval label also appears in the train-tex pool.
Manifest generate_dataset(const GenDataParams& params);

// In-memory dataset: eagerly loaded bundles plus split index pools and the
// label vocabulary (sorted unique labels over all records).
struct Dataset {
    std::vector<AssetRecord> records;
    std::vector<AssetBundle> bundles;          // aligned with records
    std::vector<int> pool_tex, pool_mv, pool_eval;
    std::vector<std::string> labels;           // vocab, sorted
    std::map<std::string, int> label_ids;

    int label_id(const std::string& label) const;
};

Dataset load_dataset(const std::string& root);

}  // namespace muv

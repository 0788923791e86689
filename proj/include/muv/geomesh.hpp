#pragma once

#include <array>
#include <string>
#include <vector>

#include "muv/grid.hpp"
#include "muv/rng.hpp"

namespace muv {

struct Vec3 {
    double x = 0, y = 0, z = 0;
    Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
    Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
    Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
};
inline double dot(const Vec3& a, const Vec3& b) { return a.x * b.x + a.y * b.y + a.z * b.z; }
inline Vec3 cross(const Vec3& a, const Vec3& b) {
    return {a.y * b.z - a.z * b.y, a.z * b.x - a.x * b.z, a.x * b.y - a.y * b.x};
}
inline double norm(const Vec3& a) { return std::sqrt(dot(a, a)); }
inline Vec3 normalized(const Vec3& a) {
    double n = norm(a);
    return n > 0 ? a * (1.0 / n) : Vec3{};
}

struct Vec2 {
    double u = 0, v = 0;
};

struct Face {
    std::array<int, 3> v;   // vertex indices
    std::array<int, 3> uv;  // uv indices, per corner
};

// Mesh with an injective UV atlas plus its ground-truth albedo texture.
// The label string doubles as the class condition for the generator.
struct TexturedAsset {
    std::string kind;
    std::string label;
    uint64_t seed = 0;
    std::vector<Vec3> vertices;   // all inside [-1,1]^3
    std::vector<Vec2> uvs;        // all inside [0,1]^2
    std::vector<Face> faces;
    Grid albedo_atlas;            // H_UV x W_UV x 3 in [0,1]
};

// Per-view geometry/appearance buffers. Normals carry the face normal of the
// covered triangle, so back-face culling guarantees n . forward < 0 exactly
// wherever validity = 1. Invalid pixels are zero in every channel.
struct ViewBuffers {
    Grid position;  // 3ch world coords
    Grid normal;    // 3ch unit vectors
    Grid validity;  // 1ch {0,1}
    Grid albedo;    // 3ch
    Grid shaded;    // 3ch
    int degenerate_skipped = 0;
};

struct UVGeometryMaps {
    Grid position;
    Grid normal;
    Grid validity;
    int degenerate_skipped = 0;
};

struct Camera {
    Vec3 eye, right, up, forward;
    double half_extent = 1.8;
    double far_plane = 6.0;
};

// Four orthographic cameras at azimuths {0,90,180,270} deg, elevation 20 deg,
// framing the unit cube, plus the fixed light direction for shading.
struct CameraRig {
    std::array<Camera, 4> cameras;
    Vec3 light_dir;
};

CameraRig make_default_rig();

struct BakeResult {
    Grid baked;     // 3ch RGB averaged over accepting views
    Grid coverage;  // 1ch {0,1}
};

struct BakeParams {
    double eps_depth = 1e-2;   // world-units tolerance for depth match
    double cos_max = -0.2;     // require n . forward below this
};

// --- Procedural assets -----------------------------------------------------

// kind in {cube, uvsphere, torus}; texture_spec "family:color1:color2[:color3]"
// with family in {checker, stripes, gradient, voronoi}. Deterministic in
// (kind, texture_spec, seed); the seed drives per-axis scale jitter while the
// texture pattern itself is a pure function of the spec string.
TexturedAsset make_primitive(const std::string& kind, const std::string& texture_spec,
                             uint64_t seed, int atlas_res = 64);

// Raw pattern evaluation in the texture's local domain coordinates.
std::array<double, 3> texture_color(const std::string& texture_spec, double s, double t);

// --- Rasterization ---------------------------------------------------------

std::vector<ViewBuffers> rasterize_views(const TexturedAsset& asset, const CameraRig& rig,
                                         int height, int width);

UVGeometryMaps rasterize_uv(const TexturedAsset& asset, int height, int width);

// out = albedo * (0.3 + 0.7 * max(0, n . light_dir)) where valid, else 0.
Grid shade_lambertian(const Grid& albedo, const Grid& normal, const Grid& validity,
                      const Vec3& light_dir);

// Back-projection baking oracle: average view RGB over views where the texel
// is visible (depth match within eps_depth, front-facing under cos_max).
BakeResult bake_views_to_uv(const std::vector<ViewBuffers>& views, const std::vector<Grid>& view_rgb,
                            const UVGeometryMaps& uvgeo, const CameraRig& rig,
                            const BakeParams& params = {});

// Projection helper shared by the rasterizer and the baking oracle.
// Returns screen x/y in [-1,1] and depth along the camera forward axis.
inline void project_point(const Camera& cam, const Vec3& p, double& sx, double& sy, double& depth) {
    Vec3 d = p - cam.eye;
    sx = dot(d, cam.right) / cam.half_extent;
    sy = dot(d, cam.up) / cam.half_extent;
    depth = dot(d, cam.forward);
}

// --- Asset store -----------------------------------------------------------

// Directory layout: mesh.txt (v/t/f records), atlas.png, meta.txt (key=value).
void save_asset(const std::string& dir, const TexturedAsset& asset);
TexturedAsset load_asset(const std::string& dir);

// Asset plus its cached render buffers; the unit the trainer/sampler consume.
struct AssetBundle {
    TexturedAsset asset;
    std::vector<ViewBuffers> views;
    UVGeometryMaps uvgeo;
};

// Renders and caches buffers under dir/cache (mgrid) with PNG previews.
void cache_buffers(const std::string& dir, const TexturedAsset& asset, const CameraRig& rig,
                   int mv_res, int uv_res);
AssetBundle load_bundle(const std::string& dir);

std::vector<std::string> known_texture_families();
std::vector<std::string> known_color_names();

}  // namespace muv

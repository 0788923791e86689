#include "muv/geomesh.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>

#include "muv/image_io.hpp"

namespace fs = std::filesystem;

namespace muv {

namespace {

constexpr double kPi = 3.14159265358979323846;

const std::map<std::string, std::array<double, 3>>& color_table() {
    static const std::map<std::string, std::array<double, 3>> table = {
        {"black", {0, 0, 0}},        {"white", {1, 1, 1}},
        {"red", {1, 0, 0}},          {"green", {0, 1, 0}},
        {"blue", {0, 0, 1}},         {"yellow", {1, 1, 0}},
        {"cyan", {0, 1, 1}},         {"magenta", {1, 0, 1}},
        {"orange", {1, 0.5, 0}},     {"purple", {0.5, 0, 0.8}},
        {"gray", {0.5, 0.5, 0.5}},   {"navy", {0, 0, 0.4}},
        {"teal", {0, 0.5, 0.5}},     {"olive", {0.5, 0.5, 0}},
    };
    return table;
}

struct TextureSpec {
    std::string family;
    std::vector<std::array<double, 3>> colors;
};

TextureSpec parse_texture_spec(const std::string& spec) {
    std::vector<std::string> parts;
    std::stringstream ss(spec);
    std::string item;
    while (std::getline(ss, item, ':')) parts.push_back(item);
    require(parts.size() >= 3 && parts.size() <= 4, ErrKind::Usage,
            "texture_spec '" + spec + "': expected family:color1:color2[:color3]");
    TextureSpec out;
    out.family = parts[0];
    const auto fams = known_texture_families();
    require(std::find(fams.begin(), fams.end(), out.family) != fams.end(), ErrKind::Usage,
            "texture_spec family '" + out.family + "' not one of {checker, stripes, gradient, voronoi-noise}");
    for (size_t i = 1; i < parts.size(); ++i) {
        auto it = color_table().find(parts[i]);
        require(it != color_table().end(), ErrKind::Usage,
                "texture_spec color '" + parts[i] + "' is not a known color name");
        out.colors.push_back(it->second);
    }
    return out;
}

std::array<double, 3> lerp3(const std::array<double, 3>& a, const std::array<double, 3>& b, double t) {
    return {a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t};
}

std::array<double, 3> eval_texture(const TextureSpec& tex, uint64_t pattern_seed, double s, double t) {
    s = std::clamp(s, 0.0, 1.0 - 1e-9);
    t = std::clamp(t, 0.0, 1.0 - 1e-9);
    const size_t k = tex.colors.size();
    if (tex.family == "checker") {
        int idx = (static_cast<int>(s * 8) + static_cast<int>(t * 8)) % static_cast<int>(k);
        return tex.colors[static_cast<size_t>(idx)];
    }
    if (tex.family == "stripes") {
        int idx = static_cast<int>(t * 6) % static_cast<int>(k);
        return tex.colors[static_cast<size_t>(idx)];
    }
    if (tex.family == "gradient") {
        if (k == 2) return lerp3(tex.colors[0], tex.colors[1], s);
        return s < 0.5 ? lerp3(tex.colors[0], tex.colors[1], 2 * s)
                       : lerp3(tex.colors[1], tex.colors[2], 2 * s - 1);
    }
    // voronoi-noise: nearest of 7 sites drawn from the pattern seed. The seed
    // comes from the spec string itself, so the pattern is tied to the label.
    Rng rng(pattern_seed);
    double best = std::numeric_limits<double>::max();
    size_t best_i = 0;
    for (size_t i = 0; i < 7; ++i) {
        double sx = rng.uniform();
        double sy = rng.uniform();
        double d = (sx - s) * (sx - s) + (sy - t) * (sy - t);
        if (d < best) {
            best = d;
            best_i = i;
        }
    }
    return tex.colors[best_i % k];
}

// Maps an atlas uv to the texture's local domain. Cube islands live in a 4x4
// cell grid and repeat the pattern per cell; sphere/torus use the whole atlas.
void domain_coords(const std::string& kind, double u, double v, double& s, double& t) {
    if (kind == "cube") {
        double su = u * 4.0, sv = v * 4.0;
        s = su - std::floor(su);
        t = sv - std::floor(sv);
    } else {
        s = u;
        t = v;
    }
}

struct MeshBuilder {
    std::vector<Vec3> vertices;
    std::vector<Vec2> uvs;
    std::vector<Face> faces;

    int add_v(const Vec3& p) {
        vertices.push_back(p);
        return static_cast<int>(vertices.size()) - 1;
    }
    int add_uv(double u, double v) {
        uvs.push_back({u, v});
        return static_cast<int>(uvs.size()) - 1;
    }
    void add_tri(int a, int b, int c, int ta, int tb, int tc) {
        faces.push_back({{a, b, c}, {ta, tb, tc}});
    }
    void add_quad(int a, int b, int c, int d, int ta, int tb, int tc, int td) {
        add_tri(a, b, c, ta, tb, tc);
        add_tri(a, c, d, ta, tc, td);
    }
};

void build_cube(MeshBuilder& m, const Vec3& s) {
    // Face corners wound CCW seen from outside; each face gets one cell of a
    // 4x4 uv island grid (cells (0..3,0) and (0..1,1)).
    struct Quad {
        Vec3 c[4];
        int cell_u, cell_v;
    };
    const double x = s.x, y = s.y, z = s.z;
    const Quad quads[6] = {
        {{{-x, -y, z}, {x, -y, z}, {x, y, z}, {-x, y, z}}, 0, 0},      // +Z
        {{{x, -y, z}, {x, -y, -z}, {x, y, -z}, {x, y, z}}, 1, 0},      // +X
        {{{x, -y, -z}, {-x, -y, -z}, {-x, y, -z}, {x, y, -z}}, 2, 0},  // -Z
        {{{-x, -y, -z}, {-x, -y, z}, {-x, y, z}, {-x, y, -z}}, 3, 0},  // -X
        {{{-x, y, z}, {x, y, z}, {x, y, -z}, {-x, y, -z}}, 0, 1},      // +Y
        {{{-x, -y, -z}, {x, -y, -z}, {x, -y, z}, {-x, -y, z}}, 1, 1},  // -Y
    };
    for (const auto& q : quads) {
        double u0 = q.cell_u / 4.0, u1 = (q.cell_u + 1) / 4.0;
        double v0 = q.cell_v / 4.0, v1 = (q.cell_v + 1) / 4.0;
        int a = m.add_v(q.c[0]), b = m.add_v(q.c[1]), c = m.add_v(q.c[2]), d = m.add_v(q.c[3]);
        int ta = m.add_uv(u0, v0), tb = m.add_uv(u1, v0), tc = m.add_uv(u1, v1), td = m.add_uv(u0, v1);
        m.add_quad(a, b, c, d, ta, tb, tc, td);
    }
}

void build_uvsphere(MeshBuilder& m, const Vec3& s) {
    const int segs = 24, rings = 12;
    // Interior rings r=1..rings-1; poles are fan apexes so every triangle has
    // nonzero area in both world and uv space.
    std::vector<std::vector<int>> vid(rings, std::vector<int>(segs + 1, -1));
    std::vector<std::vector<int>> tid(rings, std::vector<int>(segs + 1, -1));
    for (int r = 1; r < rings; ++r) {
        double theta = kPi * r / rings;
        for (int c = 0; c <= segs; ++c) {
            double phi = 2 * kPi * c / segs;
            Vec3 p{std::sin(theta) * std::sin(phi), std::cos(theta), std::sin(theta) * std::cos(phi)};
            vid[r][c] = m.add_v({p.x * s.x, p.y * s.y, p.z * s.z});
            tid[r][c] = m.add_uv(static_cast<double>(c) / segs, static_cast<double>(r) / rings);
        }
    }
    for (int r = 1; r < rings - 1; ++r)
        for (int c = 0; c < segs; ++c)
            m.add_quad(vid[r][c], vid[r + 1][c], vid[r + 1][c + 1], vid[r][c + 1],
                       tid[r][c], tid[r + 1][c], tid[r + 1][c + 1], tid[r][c + 1]);
    int north = m.add_v({0, s.y, 0});
    int south = m.add_v({0, -s.y, 0});
    for (int c = 0; c < segs; ++c) {
        int tn = m.add_uv((c + 0.5) / segs, 0.0);
        m.add_tri(north, vid[1][c], vid[1][c + 1], tn, tid[1][c], tid[1][c + 1]);
        int ts = m.add_uv((c + 0.5) / segs, 1.0);
        m.add_tri(south, vid[rings - 1][c + 1], vid[rings - 1][c], ts, tid[rings - 1][c + 1],
                  tid[rings - 1][c]);
    }
}

void build_torus(MeshBuilder& m, const Vec3& s) {
    const int major = 24, minor = 12;
    const double rmaj = 0.65, rmin = 0.35;
    std::vector<std::vector<int>> vid(major + 1, std::vector<int>(minor + 1));
    std::vector<std::vector<int>> tid(major + 1, std::vector<int>(minor + 1));
    for (int i = 0; i <= major; ++i) {
        double a = 2 * kPi * i / major;
        for (int j = 0; j <= minor; ++j) {
            double b = 2 * kPi * j / minor;
            Vec3 p{(rmaj + rmin * std::cos(b)) * std::sin(a), rmin * std::sin(b),
                   (rmaj + rmin * std::cos(b)) * std::cos(a)};
            vid[i][j] = m.add_v({p.x * s.x, p.y * s.y, p.z * s.z});
            tid[i][j] = m.add_uv(static_cast<double>(i) / major, static_cast<double>(j) / minor);
        }
    }
    for (int i = 0; i < major; ++i)
        for (int j = 0; j < minor; ++j)
            m.add_quad(vid[i][j], vid[i + 1][j], vid[i + 1][j + 1], vid[i][j + 1],
                       tid[i][j], tid[i + 1][j], tid[i + 1][j + 1], tid[i][j + 1]);
}

Vec3 face_normal(const TexturedAsset& a, const Face& f) {
    const Vec3& p0 = a.vertices[static_cast<size_t>(f.v[0])];
    const Vec3& p1 = a.vertices[static_cast<size_t>(f.v[1])];
    const Vec3& p2 = a.vertices[static_cast<size_t>(f.v[2])];
    return cross(p1 - p0, p2 - p0);
}

void sample_atlas(const Grid& atlas, double u, double v, double* rgb) {
    int col = std::clamp(static_cast<int>(std::floor(u * atlas.w)), 0, atlas.w - 1);
    int row = std::clamp(static_cast<int>(std::floor(v * atlas.h)), 0, atlas.h - 1);
    for (int ch = 0; ch < 3; ++ch) rgb[ch] = atlas.at(row, col, ch);
}

}  // namespace

std::vector<std::string> known_texture_families() {
    return {"checker", "stripes", "gradient", "voronoi-noise"};
}

std::vector<std::string> known_color_names() {
    std::vector<std::string> names;
    for (const auto& [k, v] : color_table()) names.push_back(k);
    return names;
}

std::array<double, 3> texture_color(const std::string& texture_spec, double s, double t) {
    TextureSpec tex = parse_texture_spec(texture_spec);
    return eval_texture(tex, hash64(texture_spec), s, t);
}

CameraRig make_default_rig() {
    CameraRig rig;
    const double elev = 20.0 * kPi / 180.0;
    const double dist = 3.0;
    for (int k = 0; k < 4; ++k) {
        double az = 90.0 * k * kPi / 180.0;
        Vec3 dir{std::cos(elev) * std::sin(az), std::sin(elev), std::cos(elev) * std::cos(az)};
        Camera cam;
        cam.eye = dir * dist;
        cam.forward = dir * -1.0;
        cam.right = normalized(cross(cam.forward, Vec3{0, 1, 0}));
        cam.up = cross(cam.right, cam.forward);
        cam.half_extent = 1.8;
        cam.far_plane = 6.0;
        rig.cameras[static_cast<size_t>(k)] = cam;
    }
    rig.light_dir = normalized({0.4, 0.8, 0.45});
    return rig;
}

TexturedAsset make_primitive(const std::string& kind, const std::string& texture_spec,
                             uint64_t seed, int atlas_res) {
    TextureSpec tex = parse_texture_spec(texture_spec);
    require(kind == "cube" || kind == "uvsphere" || kind == "torus", ErrKind::Usage,
            "make_primitive kind '" + kind + "' not one of {cube, uvsphere, torus}");

    // Seed drives per-axis scale jitter in [0.8, 1.0]; geometry stays inside
    // the unit cube and remains visible to the model through the geo maps.
    Rng rng(seed ^ hash64(kind));
    Vec3 scale{rng.uniform(0.8, 1.0), rng.uniform(0.8, 1.0), rng.uniform(0.8, 1.0)};

    MeshBuilder mb;
    if (kind == "cube") build_cube(mb, scale);
    else if (kind == "uvsphere") build_uvsphere(mb, scale);
    else build_torus(mb, scale);

    TexturedAsset asset;
    asset.kind = kind;
    asset.label = texture_spec;
    asset.seed = seed;
    asset.vertices = std::move(mb.vertices);
    asset.uvs = std::move(mb.uvs);
    asset.faces = std::move(mb.faces);

    const uint64_t pattern_seed = hash64(texture_spec);
    asset.albedo_atlas = Grid(atlas_res, atlas_res, 3);
    for (int row = 0; row < atlas_res; ++row) {
        for (int col = 0; col < atlas_res; ++col) {
            double u = (col + 0.5) / atlas_res;
            double v = (row + 0.5) / atlas_res;
            double s, t;
            domain_coords(kind, u, v, s, t);
            auto c = eval_texture(tex, pattern_seed, s, t);
            for (int ch = 0; ch < 3; ++ch) asset.albedo_atlas.at(row, col, ch) = c[ch];
        }
    }
    return asset;
}

std::vector<ViewBuffers> rasterize_views(const TexturedAsset& asset, const CameraRig& rig,
                                         int height, int width) {
    std::vector<ViewBuffers> out;
    out.reserve(rig.cameras.size());
    for (const auto& cam : rig.cameras) {
        ViewBuffers vb;
        vb.position = Grid(height, width, 3);
        vb.normal = Grid(height, width, 3);
        vb.validity = Grid(height, width, 1);
        vb.albedo = Grid(height, width, 3);
        Grid depth(height, width, 1, cam.far_plane);

        for (const auto& f : asset.faces) {
            Vec3 n_raw = face_normal(asset, f);
            if (norm(n_raw) < 1e-12) {
                ++vb.degenerate_skipped;
                continue;
            }
            Vec3 n = normalized(n_raw);

            double sx[3], sy[3], sd[3];
            for (int i = 0; i < 3; ++i)
                project_point(cam, asset.vertices[static_cast<size_t>(f.v[i])], sx[i], sy[i], sd[i]);
            double area2 = (sx[1] - sx[0]) * (sy[2] - sy[0]) - (sx[2] - sx[0]) * (sy[1] - sy[0]);
            if (std::abs(area2) < 1e-12) {
                ++vb.degenerate_skipped;
                continue;
            }
            if (area2 < 0) continue;  // back-face

            // Pixel centers: col j at screen x=(j+0.5)/W*2-1, row i at y=1-(i+0.5)/H*2.
            auto col_of = [&](double x) { return (x + 1) * 0.5 * width - 0.5; };
            auto row_of = [&](double y) { return (1 - y) * 0.5 * height - 0.5; };
            double cmin = col_of(std::min({sx[0], sx[1], sx[2]}));
            double cmax = col_of(std::max({sx[0], sx[1], sx[2]}));
            double rmin = row_of(std::max({sy[0], sy[1], sy[2]}));
            double rmax = row_of(std::min({sy[0], sy[1], sy[2]}));
            int c0 = std::max(0, static_cast<int>(std::ceil(cmin)));
            int c1 = std::min(width - 1, static_cast<int>(std::floor(cmax)));
            int r0 = std::max(0, static_cast<int>(std::ceil(rmin)));
            int r1 = std::min(height - 1, static_cast<int>(std::floor(rmax)));

            for (int i = r0; i <= r1; ++i) {
                double py = 1 - (i + 0.5) / height * 2;
                for (int j = c0; j <= c1; ++j) {
                    double px = (j + 0.5) / width * 2 - 1;
                    double w0 = (sx[2] - sx[1]) * (py - sy[1]) - (sy[2] - sy[1]) * (px - sx[1]);
                    double w1 = (sx[0] - sx[2]) * (py - sy[2]) - (sy[0] - sy[2]) * (px - sx[2]);
                    double w2 = (sx[1] - sx[0]) * (py - sy[0]) - (sy[1] - sy[0]) * (px - sx[0]);
                    if (w0 < 0 || w1 < 0 || w2 < 0) continue;
                    double a = w0 / area2, b = w1 / area2, g = w2 / area2;
                    double d = a * sd[0] + b * sd[1] + g * sd[2];
                    if (d >= depth.at(i, j, 0)) continue;
                    depth.at(i, j, 0) = d;
                    const Vec3& p0 = asset.vertices[static_cast<size_t>(f.v[0])];
                    const Vec3& p1 = asset.vertices[static_cast<size_t>(f.v[1])];
                    const Vec3& p2 = asset.vertices[static_cast<size_t>(f.v[2])];
                    vb.position.at(i, j, 0) = a * p0.x + b * p1.x + g * p2.x;
                    vb.position.at(i, j, 1) = a * p0.y + b * p1.y + g * p2.y;
                    vb.position.at(i, j, 2) = a * p0.z + b * p1.z + g * p2.z;
                    vb.normal.at(i, j, 0) = n.x;
                    vb.normal.at(i, j, 1) = n.y;
                    vb.normal.at(i, j, 2) = n.z;
                    const Vec2& t0 = asset.uvs[static_cast<size_t>(f.uv[0])];
                    const Vec2& t1 = asset.uvs[static_cast<size_t>(f.uv[1])];
                    const Vec2& t2 = asset.uvs[static_cast<size_t>(f.uv[2])];
                    double u = a * t0.u + b * t1.u + g * t2.u;
                    double v = a * t0.v + b * t1.v + g * t2.v;
                    double rgb[3];
                    sample_atlas(asset.albedo_atlas, u, v, rgb);
                    for (int ch = 0; ch < 3; ++ch) vb.albedo.at(i, j, ch) = rgb[ch];
                    vb.validity.at(i, j, 0) = 1.0;
                }
            }
        }
        vb.shaded = shade_lambertian(vb.albedo, vb.normal, vb.validity, rig.light_dir);
        out.push_back(std::move(vb));
    }
    return out;
}

UVGeometryMaps rasterize_uv(const TexturedAsset& asset, int height, int width) {
    UVGeometryMaps maps;
    maps.position = Grid(height, width, 3);
    maps.normal = Grid(height, width, 3);
    maps.validity = Grid(height, width, 1);

    for (const auto& f : asset.faces) {
        Vec3 n_raw = face_normal(asset, f);
        if (norm(n_raw) < 1e-12) {
            ++maps.degenerate_skipped;
            continue;
        }
        Vec3 n = normalized(n_raw);

        // Texel space: uv (u,v) lands at col u*W-0.5, row v*H-0.5.
        double tx[3], ty[3];
        Vec3 pos[3];
        for (int i = 0; i < 3; ++i) {
            const Vec2& t = asset.uvs[static_cast<size_t>(f.uv[i])];
            tx[i] = t.u * width - 0.5;
            ty[i] = t.v * height - 0.5;
            pos[i] = asset.vertices[static_cast<size_t>(f.v[i])];
        }
        double area2 = (tx[1] - tx[0]) * (ty[2] - ty[0]) - (tx[2] - tx[0]) * (ty[1] - ty[0]);
        if (std::abs(area2) < 1e-12) {
            ++maps.degenerate_skipped;
            continue;
        }
        if (area2 < 0) {  // flip to a consistent orientation
            std::swap(tx[1], tx[2]);
            std::swap(ty[1], ty[2]);
            std::swap(pos[1], pos[2]);
            area2 = -area2;
        }
        int c0 = std::max(0, static_cast<int>(std::ceil(std::min({tx[0], tx[1], tx[2]}))));
        int c1 = std::min(width - 1, static_cast<int>(std::floor(std::max({tx[0], tx[1], tx[2]}))));
        int r0 = std::max(0, static_cast<int>(std::ceil(std::min({ty[0], ty[1], ty[2]}))));
        int r1 = std::min(height - 1, static_cast<int>(std::floor(std::max({ty[0], ty[1], ty[2]}))));
        for (int i = r0; i <= r1; ++i) {
            for (int j = c0; j <= c1; ++j) {
                double px = j, py = i;
                double w0 = (tx[2] - tx[1]) * (py - ty[1]) - (ty[2] - ty[1]) * (px - tx[1]);
                double w1 = (tx[0] - tx[2]) * (py - ty[2]) - (ty[0] - ty[2]) * (px - tx[2]);
                double w2 = (tx[1] - tx[0]) * (py - ty[0]) - (ty[1] - ty[0]) * (px - tx[0]);
                if (w0 < 0 || w1 < 0 || w2 < 0) continue;
                double a = w0 / area2, b = w1 / area2, g = w2 / area2;
                maps.position.at(i, j, 0) = a * pos[0].x + b * pos[1].x + g * pos[2].x;
                maps.position.at(i, j, 1) = a * pos[0].y + b * pos[1].y + g * pos[2].y;
                maps.position.at(i, j, 2) = a * pos[0].z + b * pos[1].z + g * pos[2].z;
                maps.normal.at(i, j, 0) = n.x;
                maps.normal.at(i, j, 1) = n.y;
                maps.normal.at(i, j, 2) = n.z;
                maps.validity.at(i, j, 0) = 1.0;
            }
        }
    }
    return maps;
}

Grid shade_lambertian(const Grid& albedo, const Grid& normal, const Grid& validity,
                      const Vec3& light_dir) {
    require(std::abs(norm(light_dir) - 1.0) < 1e-6, ErrKind::Usage,
            "shade_lambertian: light_dir must be unit length");
    require_same_shape(albedo, normal, "shade_lambertian albedo/normal");
    Grid out(albedo.h, albedo.w, 3);
    for (int i = 0; i < albedo.h; ++i) {
        for (int j = 0; j < albedo.w; ++j) {
            if (validity.at(i, j, 0) < 0.5) continue;
            Vec3 n{normal.at(i, j, 0), normal.at(i, j, 1), normal.at(i, j, 2)};
            double diff = 0.3 + 0.7 * std::max(0.0, dot(n, light_dir));
            for (int ch = 0; ch < 3; ++ch) out.at(i, j, ch) = albedo.at(i, j, ch) * diff;
        }
    }
    return out;
}

BakeResult bake_views_to_uv(const std::vector<ViewBuffers>& views, const std::vector<Grid>& view_rgb,
                            const UVGeometryMaps& uvgeo, const CameraRig& rig,
                            const BakeParams& params) {
    require(views.size() == rig.cameras.size() && view_rgb.size() == views.size(), ErrKind::Data,
            "bake_views_to_uv: need one rgb grid per view");
    const int H = uvgeo.position.h, W = uvgeo.position.w;
    BakeResult res;
    res.baked = Grid(H, W, 3);
    res.coverage = Grid(H, W, 1);

    // Depth buffers recovered from the cached position maps.
    std::vector<Grid> depth;
    for (size_t k = 0; k < views.size(); ++k) {
        const Camera& cam = rig.cameras[k];
        const Grid& pos = views[k].position;
        Grid d(pos.h, pos.w, 1, cam.far_plane);
        for (int i = 0; i < pos.h; ++i)
            for (int j = 0; j < pos.w; ++j)
                if (views[k].validity.at(i, j, 0) > 0.5) {
                    Vec3 p{pos.at(i, j, 0), pos.at(i, j, 1), pos.at(i, j, 2)};
                    d.at(i, j, 0) = dot(p - cam.eye, cam.forward);
                }
        depth.push_back(std::move(d));
    }

    for (int i = 0; i < H; ++i) {
        for (int j = 0; j < W; ++j) {
            if (uvgeo.validity.at(i, j, 0) < 0.5) continue;
            Vec3 p{uvgeo.position.at(i, j, 0), uvgeo.position.at(i, j, 1), uvgeo.position.at(i, j, 2)};
            Vec3 n{uvgeo.normal.at(i, j, 0), uvgeo.normal.at(i, j, 1), uvgeo.normal.at(i, j, 2)};
            double acc[3] = {0, 0, 0};
            int n_accept = 0;
            for (size_t k = 0; k < views.size(); ++k) {
                const Camera& cam = rig.cameras[k];
                if (dot(n, cam.forward) >= params.cos_max) continue;
                double sx, sy, dt;
                project_point(cam, p, sx, sy, dt);
                const int vh = views[k].position.h, vw = views[k].position.w;
                double col_f = (sx + 1) * 0.5 * vw - 0.5;
                double row_f = (1 - sy) * 0.5 * vh - 0.5;
                int jc = static_cast<int>(std::lround(col_f));
                int ic = static_cast<int>(std::lround(row_f));
                if (ic < 0 || ic >= vh || jc < 0 || jc >= vw) continue;
                if (views[k].validity.at(ic, jc, 0) < 0.5) continue;

                // Depth reference: bilinear over the 2x2 neighborhood when all
                // four pixels are valid (exact on planar interiors), nearest
                // otherwise.
                double dref = depth[k].at(ic, jc, 0);
                int i0 = static_cast<int>(std::floor(row_f)), j0 = static_cast<int>(std::floor(col_f));
                if (i0 >= 0 && j0 >= 0 && i0 + 1 < vh && j0 + 1 < vw) {
                    bool all_valid = true;
                    for (int di = 0; di <= 1 && all_valid; ++di)
                        for (int dj = 0; dj <= 1; ++dj)
                            if (views[k].validity.at(i0 + di, j0 + dj, 0) < 0.5) {
                                all_valid = false;
                                break;
                            }
                    if (all_valid) {
                        double fy = row_f - i0, fx = col_f - j0;
                        dref = (1 - fy) * ((1 - fx) * depth[k].at(i0, j0, 0) + fx * depth[k].at(i0, j0 + 1, 0)) +
                               fy * ((1 - fx) * depth[k].at(i0 + 1, j0, 0) + fx * depth[k].at(i0 + 1, j0 + 1, 0));
                    }
                }
                if (std::abs(dt - dref) > params.eps_depth) continue;
                for (int ch = 0; ch < 3; ++ch) acc[ch] += view_rgb[k].at(ic, jc, ch);
                ++n_accept;
            }
            if (n_accept > 0) {
                res.coverage.at(i, j, 0) = 1.0;
                for (int ch = 0; ch < 3; ++ch) res.baked.at(i, j, ch) = acc[ch] / n_accept;
            }
        }
    }
    return res;
}

// --- Asset store -------------------------------------------------------------

void save_asset(const std::string& dir, const TexturedAsset& asset) {
    fs::create_directories(dir);
    {
        std::ofstream os(dir + "/mesh.txt");
        require(os.good(), ErrKind::Data, "save_asset: cannot write " + dir + "/mesh.txt");
        os << "muvmesh 1\n";
        char buf[128];
        for (const auto& p : asset.vertices) {
            std::snprintf(buf, sizeof(buf), "v %.17g %.17g %.17g\n", p.x, p.y, p.z);
            os << buf;
        }
        for (const auto& t : asset.uvs) {
            std::snprintf(buf, sizeof(buf), "t %.17g %.17g\n", t.u, t.v);
            os << buf;
        }
        for (const auto& f : asset.faces) {
            os << "f " << f.v[0] << " " << f.v[1] << " " << f.v[2] << " " << f.uv[0] << " "
               << f.uv[1] << " " << f.uv[2] << "\n";
        }
    }
    png_write(dir + "/atlas.png", asset.albedo_atlas);
    {
        std::ofstream os(dir + "/meta.txt");
        os << "kind=" << asset.kind << "\n";
        os << "label=" << asset.label << "\n";
        os << "seed=" << asset.seed << "\n";
    }
}

TexturedAsset load_asset(const std::string& dir) {
    TexturedAsset asset;
    std::ifstream is(dir + "/mesh.txt");
    require(is.good(), ErrKind::Data, "load_asset: cannot read " + dir + "/mesh.txt");
    std::string header;
    std::getline(is, header);
    require(header.rfind("muvmesh", 0) == 0, ErrKind::Data, "load_asset: bad mesh header in " + dir);
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string tag;
        ls >> tag;
        if (tag == "v") {
            Vec3 p;
            ls >> p.x >> p.y >> p.z;
            asset.vertices.push_back(p);
        } else if (tag == "t") {
            Vec2 t;
            ls >> t.u >> t.v;
            asset.uvs.push_back(t);
        } else if (tag == "f") {
            Face f;
            ls >> f.v[0] >> f.v[1] >> f.v[2] >> f.uv[0] >> f.uv[1] >> f.uv[2];
            asset.faces.push_back(f);
        } else {
            throw Error(ErrKind::Data, "load_asset: unknown record '" + tag + "' in " + dir);
        }
    }
    asset.albedo_atlas = png_read(dir + "/atlas.png");

    std::ifstream ms(dir + "/meta.txt");
    require(ms.good(), ErrKind::Data, "load_asset: cannot read " + dir + "/meta.txt");
    while (std::getline(ms, line)) {
        auto eq = line.find('=');
        if (eq == std::string::npos) continue;
        std::string key = line.substr(0, eq), val = line.substr(eq + 1);
        if (key == "kind") asset.kind = val;
        else if (key == "label") asset.label = val;
        else if (key == "seed") asset.seed = std::stoull(val);
    }
    return asset;
}

namespace {

// Packed cache layout. view: pos3 | nrm3 | val1 | alb3 | shd3. uvgeo: pos3 | nrm3 | val1.
Grid pack_view(const ViewBuffers& vb) {
    Grid g(vb.position.h, vb.position.w, 13);
    for (int i = 0; i < g.h; ++i)
        for (int j = 0; j < g.w; ++j) {
            for (int ch = 0; ch < 3; ++ch) {
                g.at(i, j, ch) = vb.position.at(i, j, ch);
                g.at(i, j, 3 + ch) = vb.normal.at(i, j, ch);
                g.at(i, j, 7 + ch) = vb.albedo.at(i, j, ch);
                g.at(i, j, 10 + ch) = vb.shaded.at(i, j, ch);
            }
            g.at(i, j, 6) = vb.validity.at(i, j, 0);
        }
    return g;
}

ViewBuffers unpack_view(const Grid& g) {
    require(g.c == 13, ErrKind::Data, "view cache: expected 13 channels, got " + std::to_string(g.c));
    ViewBuffers vb;
    vb.position = Grid(g.h, g.w, 3);
    vb.normal = Grid(g.h, g.w, 3);
    vb.validity = Grid(g.h, g.w, 1);
    vb.albedo = Grid(g.h, g.w, 3);
    vb.shaded = Grid(g.h, g.w, 3);
    for (int i = 0; i < g.h; ++i)
        for (int j = 0; j < g.w; ++j) {
            for (int ch = 0; ch < 3; ++ch) {
                vb.position.at(i, j, ch) = g.at(i, j, ch);
                vb.normal.at(i, j, ch) = g.at(i, j, 3 + ch);
                vb.albedo.at(i, j, ch) = g.at(i, j, 7 + ch);
                vb.shaded.at(i, j, ch) = g.at(i, j, 10 + ch);
            }
            vb.validity.at(i, j, 0) = g.at(i, j, 6);
        }
    return vb;
}

Grid normal_preview(const Grid& normal) {
    Grid g(normal.h, normal.w, 3);
    for (size_t i = 0; i < g.size(); ++i) g.data[i] = normal.data[i] * 0.5 + 0.5;
    return g;
}

}  // namespace

void cache_buffers(const std::string& dir, const TexturedAsset& asset, const CameraRig& rig,
                   int mv_res, int uv_res) {
    fs::create_directories(dir + "/cache");
    auto views = rasterize_views(asset, rig, mv_res, mv_res);
    for (size_t k = 0; k < views.size(); ++k) {
        grid_write(dir + "/cache/view" + std::to_string(k) + ".mgrid", pack_view(views[k]));
        png_write(dir + "/cache/view" + std::to_string(k) + "_albedo.png", views[k].albedo);
        png_write(dir + "/cache/view" + std::to_string(k) + "_shaded.png", views[k].shaded);
        png_write(dir + "/cache/view" + std::to_string(k) + "_normal.png", normal_preview(views[k].normal));
    }
    auto uvgeo = rasterize_uv(asset, uv_res, uv_res);
    Grid g(uv_res, uv_res, 7);
    for (int i = 0; i < uv_res; ++i)
        for (int j = 0; j < uv_res; ++j) {
            for (int ch = 0; ch < 3; ++ch) {
                g.at(i, j, ch) = uvgeo.position.at(i, j, ch);
                g.at(i, j, 3 + ch) = uvgeo.normal.at(i, j, ch);
            }
            g.at(i, j, 6) = uvgeo.validity.at(i, j, 0);
        }
    grid_write(dir + "/cache/uvgeo.mgrid", g);
    png_write(dir + "/cache/uv_normal.png", normal_preview(uvgeo.normal));
}

AssetBundle load_bundle(const std::string& dir) {
    AssetBundle b;
    b.asset = load_asset(dir);
    for (int k = 0; k < 4; ++k) {
        std::string path = dir + "/cache/view" + std::to_string(k) + ".mgrid";
        require(fs::exists(path), ErrKind::Data,
                "load_bundle: missing cache " + path + " (run gen-data first)");
        b.views.push_back(unpack_view(grid_read(path)));
    }
    Grid g = grid_read(dir + "/cache/uvgeo.mgrid");
    require(g.c == 7, ErrKind::Data, "uvgeo cache: expected 7 channels");
    b.uvgeo.position = Grid(g.h, g.w, 3);
    b.uvgeo.normal = Grid(g.h, g.w, 3);
    b.uvgeo.validity = Grid(g.h, g.w, 1);
    for (int i = 0; i < g.h; ++i)
        for (int j = 0; j < g.w; ++j) {
            for (int ch = 0; ch < 3; ++ch) {
                b.uvgeo.position.at(i, j, ch) = g.at(i, j, ch);
                b.uvgeo.normal.at(i, j, ch) = g.at(i, j, 3 + ch);
            }
            b.uvgeo.validity.at(i, j, 0) = g.at(i, j, 6);
        }
    return b;
}

}  // namespace muv

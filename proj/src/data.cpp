#include "ddet/data.hpp"

#include "ddet/csv.hpp"
#include "ddet/rng.hpp"
#include "ddet/voc_xml.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <stdexcept>

namespace ddet {

namespace {

struct Canvas {
    TensorF* img;
    int size;

    void set(int x, int y, float r, float g, float b) {
        if (x < 0 || y < 0 || x >= size || y >= size) return;
        (*img)[(0 * static_cast<size_t>(size) + y) * size + x] = r;
        (*img)[(1 * static_cast<size_t>(size) + y) * size + x] = g;
        (*img)[(2 * static_cast<size_t>(size) + y) * size + x] = b;
    }
    void blend(int x, int y, float r, float g, float b, float a) {
        if (x < 0 || y < 0 || x >= size || y >= size || a <= 0) return;
        for (int c = 0; c < 3; ++c) {
            float& px = (*img)[(static_cast<size_t>(c) * size + y) * size + x];
            const float v = c == 0 ? r : (c == 1 ? g : b);
            px = px * (1.0f - a) + v * a;
        }
    }
};

struct Color {
    float r, g, b;
};

void fill_rect(Canvas& cv, double x1, double y1, double x2, double y2, Color c, float a = 1.0f) {
    for (int y = static_cast<int>(std::floor(y1)); y <= static_cast<int>(std::ceil(y2)); ++y)
        for (int x = static_cast<int>(std::floor(x1)); x <= static_cast<int>(std::ceil(x2)); ++x)
            if (x + 0.5 >= x1 && x + 0.5 <= x2 && y + 0.5 >= y1 && y + 0.5 <= y2) cv.blend(x, y, c.r, c.g, c.b, a);
}

void fill_ellipse(Canvas& cv, double cx, double cy, double rx, double ry, Color c, float a = 1.0f) {
    for (int y = static_cast<int>(std::floor(cy - ry)); y <= static_cast<int>(std::ceil(cy + ry)); ++y)
        for (int x = static_cast<int>(std::floor(cx - rx)); x <= static_cast<int>(std::ceil(cx + rx)); ++x) {
            const double dx = (x + 0.5 - cx) / rx, dy = (y + 0.5 - cy) / ry;
            if (dx * dx + dy * dy <= 1.0) cv.blend(x, y, c.r, c.g, c.b, a);
        }
}

void draw_ring(Canvas& cv, double cx, double cy, double radius, double thickness, Color c, double gap_from = 0,
               double gap_to = 0) {
    for (int y = static_cast<int>(std::floor(cy - radius - 1)); y <= static_cast<int>(std::ceil(cy + radius + 1)); ++y)
        for (int x = static_cast<int>(std::floor(cx - radius - 1)); x <= static_cast<int>(std::ceil(cx + radius + 1));
             ++x) {
            const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
            const double d = std::sqrt(dx * dx + dy * dy);
            if (std::abs(d - radius) > thickness / 2) continue;
            if (gap_to > gap_from) {
                double ang = std::atan2(dy, dx);
                if (ang < 0) ang += 2 * 3.14159265358979323846;
                if (ang >= gap_from && ang <= gap_to) continue; // broken arc
            }
            cv.blend(x, y, c.r, c.g, c.b, 1.0f);
        }
}

void draw_line(Canvas& cv, double x1, double y1, double x2, double y2, double width, Color c) {
    const double len = std::max(1.0, std::hypot(x2 - x1, y2 - y1));
    const int steps = static_cast<int>(len * 2) + 1;
    for (int i = 0; i <= steps; ++i) {
        const double t = static_cast<double>(i) / steps;
        const double px = x1 + (x2 - x1) * t, py = y1 + (y2 - y1) * t;
        fill_ellipse(cv, px, py, width / 2, width / 2, c);
    }
}

// Box blur the RGB patch [x1,x2]x[y1,y2] in place (3x3, `passes` times).
void blur_patch(TensorF& img, int size, int x1, int y1, int x2, int y2, int passes) {
    x1 = std::max(0, x1);
    y1 = std::max(0, y1);
    x2 = std::min(size - 1, x2);
    y2 = std::min(size - 1, y2);
    if (x1 >= x2 || y1 >= y2) return;
    TensorF tmp = img;
    for (int p = 0; p < passes; ++p) {
        for (int c = 0; c < 3; ++c)
            for (int y = y1; y <= y2; ++y)
                for (int x = x1; x <= x2; ++x) {
                    float acc = 0;
                    int n = 0;
                    for (int dy = -1; dy <= 1; ++dy)
                        for (int dx = -1; dx <= 1; ++dx) {
                            const int yy = y + dy, xx = x + dx;
                            if (yy < 0 || xx < 0 || yy >= size || xx >= size) continue;
                            acc += img[(static_cast<size_t>(c) * size + yy) * size + xx];
                            ++n;
                        }
                    tmp[(static_cast<size_t>(c) * size + y) * size + x] = acc / n;
                }
        img = tmp;
    }
}

constexpr double kPi = 3.14159265358979323846;

// Draws one glyph centered at (cx, cy) with nominal size s; returns its
// tight bounding box.
Box draw_glyph(Canvas& cv, TensorF& img, int size, int class_id, double cx, double cy, double s, Rng& rng) {
    Box box;
    const double jitter = rng.uniform(-0.04, 0.04); // per-instance shade jitter
    if (class_id >= 3) {
        // insulator disc stack (jyz_sh = damage notch, jyz_sl = flashover streak)
        const int ndisc = rng.randint(3, 4);
        const double w = s, h = s * 1.15;
        const double disc_ry = h / (2.6 * ndisc);
        const Color disc{static_cast<float>(0.55 + jitter), static_cast<float>(0.62 + jitter),
                         static_cast<float>(0.74 + jitter)};
        const Color core{0.35f, 0.38f, 0.45f};
        fill_rect(cv, cx - w * 0.08, cy - h / 2, cx + w * 0.08, cy + h / 2, core);
        std::vector<double> disc_y(ndisc);
        for (int i = 0; i < ndisc; ++i) {
            disc_y[i] = cy - h / 2 + disc_ry + i * (h - 2 * disc_ry) / std::max(1, ndisc - 1);
            fill_ellipse(cv, cx, disc_y[i], w / 2, disc_ry, disc);
        }
        if (class_id == 3) {
            // jyz_sh: breakage notch on one disc — a rust-edged bite
            const int which = rng.randint(0, ndisc - 1);
            const double side = rng.uniform() < 0.5 ? -1.0 : 1.0;
            const double nx = cx + side * w * 0.32, ny = disc_y[which];
            fill_ellipse(cv, nx, ny, w * 0.18, disc_ry * 1.25, Color{0.32f, 0.18f, 0.10f});
            fill_ellipse(cv, nx + side * w * 0.08, ny, w * 0.10, disc_ry * 0.8, Color{0.85f, 0.45f, 0.20f});
        } else {
            // jyz_sl: flashover — dark charred streak down the stack
            const double x0 = cx + rng.uniform(-0.15, 0.15) * w;
            const double x1 = cx + rng.uniform(-0.15, 0.15) * w;
            draw_line(cv, x0, cy - h / 2, x1, cy + h / 2, std::max(2.0, s * 0.16), Color{0.10f, 0.08f, 0.06f});
        }
        box = {cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2};
    } else {
        // gauge dial (bj = normal, bj_mh = blurred, bj_ps = damaged ring)
        const double radius = s / 2;
        const Color ring{static_cast<float>(0.88 + jitter), static_cast<float>(0.84 + jitter),
                         static_cast<float>(0.66 + jitter)};
        const Color face{static_cast<float>(0.93 + jitter), static_cast<float>(0.92 + jitter),
                         static_cast<float>(0.84 + jitter)};
        fill_ellipse(cv, cx, cy, radius - 1, radius - 1, face);
        double gap_from = 0, gap_to = 0;
        if (class_id == 2) { // bj_ps: broken arc
            gap_from = rng.uniform(0, 2 * kPi * 0.7);
            gap_to = gap_from + rng.uniform(kPi / 3, kPi / 2);
        }
        draw_ring(cv, cx, cy, radius - 1.5, 3.0, ring, gap_from, gap_to);
        // needle
        const double ang = rng.uniform(0, 2 * kPi);
        draw_line(cv, cx, cy, cx + std::cos(ang) * radius * 0.62, cy + std::sin(ang) * radius * 0.62, 1.6,
                  Color{0.15f, 0.10f, 0.10f});
        fill_ellipse(cv, cx, cy, 1.5, 1.5, Color{0.15f, 0.10f, 0.10f});
        if (class_id == 2) {
            // crack across the face
            const double a0 = rng.uniform(0, 2 * kPi);
            double px = cx + std::cos(a0) * radius * 0.9, py = cy + std::sin(a0) * radius * 0.9;
            double qx = cx, qy = cy;
            for (int seg = 0; seg < 3; ++seg) {
                const double nx2 = qx + rng.uniform(-radius * 0.4, radius * 0.4);
                const double ny2 = qy + rng.uniform(-radius * 0.4, radius * 0.4);
                draw_line(cv, px, py, nx2, ny2, 1.2, Color{0.22f, 0.10f, 0.08f});
                px = nx2;
                py = ny2;
            }
        }
        if (class_id == 1) {
            // bj_mh: blur the whole glyph region
            const int m = static_cast<int>(radius) + 2;
            blur_patch(img, size, static_cast<int>(cx) - m, static_cast<int>(cy) - m, static_cast<int>(cx) + m,
                       static_cast<int>(cy) + m, 3);
        }
        box = {cx - radius, cy - radius, cx + radius, cy + radius};
    }
    box.x1 = std::max(0.0, std::floor(box.x1));
    box.y1 = std::max(0.0, std::floor(box.y1));
    box.x2 = std::min(static_cast<double>(size), std::ceil(box.x2));
    box.y2 = std::min(static_cast<double>(size), std::ceil(box.y2));
    return box;
}

int draw_class(Rng& rng, const std::array<double, 5>& weights) {
    const double total = std::accumulate(weights.begin(), weights.end(), 0.0);
    if (total <= 0) throw std::invalid_argument("generate_sample: class weights must sum > 0");
    double u = rng.uniform() * total;
    for (int i = 0; i < 5; ++i) {
        u -= weights[i];
        if (u < 0) return i;
    }
    return 4;
}

} // namespace

DatasetSample generate_sample(uint64_t seed, int index, const GenSpec& spec) {
    if (spec.size < 48) throw std::invalid_argument("generate_sample: image size must be >= 48");
    Rng rng(seed, static_cast<uint64_t>(index));
    const int size = spec.size;
    DatasetSample sample;
    sample.image = TensorF({3, size, size});
    sample.image_id = "img_" + std::to_string(index);
    Canvas cv{&sample.image, size};

    // background: per-channel constant fill; clutter adds soft shapes + noise
    const float base = static_cast<float>(rng.uniform(0.32, 0.48));
    const float tint_r = static_cast<float>(rng.uniform(-0.02, 0.02));
    const float tint_b = static_cast<float>(rng.uniform(-0.02, 0.02));
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) cv.set(x, y, base + tint_r, base, base + tint_b);
    if (spec.clutter > 0) {
        const int nblob = static_cast<int>(std::floor(6 * spec.clutter));
        for (int i = 0; i < nblob; ++i) {
            const double bx = rng.uniform(0, size), by = rng.uniform(0, size);
            const double brx = rng.uniform(3, 10), bry = rng.uniform(3, 10);
            const float shade = static_cast<float>(rng.uniform(-0.07, 0.07) * spec.clutter);
            fill_ellipse(cv, bx, by, brx, bry, Color{base + shade, base + shade, base + shade}, 0.8f);
        }
        const float amp = static_cast<float>(0.025 * spec.clutter);
        for (size_t i = 0; i < sample.image.numel(); ++i)
            sample.image[i] += static_cast<float>(rng.uniform(-amp, amp));
    }

    // objects: 1-4 glyphs, centers well separated
    const int want = rng.randint(1, 4);
    std::vector<std::pair<double, double>> centers;
    for (int k = 0; k < want; ++k) {
        const double s = rng.uniform(14, 24);
        const double margin = s * 0.65 + 2;
        bool placed = false;
        for (int attempt = 0; attempt < 40 && !placed; ++attempt) {
            const double cx = rng.uniform(margin, size - margin);
            const double cy = rng.uniform(margin, size - margin);
            bool ok = true;
            for (const auto& [px, py] : centers)
                if (std::hypot(cx - px, cy - py) < 18) {
                    ok = false;
                    break;
                }
            if (!ok) continue;
            const int cls = draw_class(rng, spec.class_weights);
            Rng glyph_rng(rng.next_u64());
            const Box box = draw_glyph(cv, sample.image, size, cls, cx, cy, s, glyph_rng);
            sample.labels.push_back({box, cls});
            centers.emplace_back(cx, cy);
            placed = true;
        }
    }

    for (size_t i = 0; i < sample.image.numel(); ++i)
        sample.image[i] = std::min(1.0f, std::max(0.0f, sample.image[i]));
    return sample;
}

ImageU8 tensor_to_u8(const TensorF& img) {
    if (img.rank() != 3 || img.shape[0] != 3) throw std::invalid_argument("tensor_to_u8: expected [3,H,W]");
    ImageU8 out;
    out.h = img.shape[1];
    out.w = img.shape[2];
    out.channels = 3;
    out.data.resize(static_cast<size_t>(out.w) * out.h * 3);
    const size_t hw = static_cast<size_t>(out.w) * out.h;
    for (size_t p = 0; p < hw; ++p)
        for (int c = 0; c < 3; ++c) {
            const float v = std::min(1.0f, std::max(0.0f, img[c * hw + p]));
            out.data[p * 3 + c] = static_cast<uint8_t>(std::lround(v * 255.0f));
        }
    return out;
}

TensorF u8_to_tensor(const ImageU8& img) {
    if (img.channels != 3) throw std::invalid_argument("u8_to_tensor: expected RGB");
    TensorF out({3, img.h, img.w});
    const size_t hw = static_cast<size_t>(img.w) * img.h;
    for (size_t p = 0; p < hw; ++p)
        for (int c = 0; c < 3; ++c) out[c * hw + p] = static_cast<float>(img.data[p * 3 + c]) / 255.0f;
    return out;
}

Split split_dataset(const std::vector<std::string>& ids, std::array<int, 3> ratios, uint64_t seed) {
    if (ratios[0] <= 0 || ratios[1] <= 0 || ratios[2] <= 0)
        throw std::invalid_argument("split_dataset: ratios must be positive");
    const size_t n = ids.size();
    if (n < 3) throw std::invalid_argument("split_dataset: need at least as many ids as ratio parts");
    std::vector<std::string> shuffled = ids;
    Rng rng(seed, 7); // dedicated stream so splits are independent of generation
    for (size_t i = n - 1; i > 0; --i) {
        const size_t j = static_cast<size_t>(rng.randint(0, static_cast<long long>(i)));
        std::swap(shuffled[i], shuffled[j]);
    }
    const double total = ratios[0] + ratios[1] + ratios[2];
    // largest-remainder apportionment (ties favor the earlier part)
    std::array<size_t, 3> counts{};
    std::array<double, 3> frac{};
    size_t assigned = 0;
    for (int i = 0; i < 3; ++i) {
        const double exact = n * ratios[i] / total;
        counts[i] = static_cast<size_t>(std::floor(exact));
        frac[i] = exact - std::floor(exact);
        assigned += counts[i];
    }
    std::array<int, 3> order{0, 1, 2};
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return frac[a] > frac[b]; });
    for (size_t r = 0; r < n - assigned; ++r) ++counts[order[r % 3]];

    Split out;
    size_t pos = 0;
    for (size_t i = 0; i < counts[0]; ++i) out.train.push_back(shuffled[pos++]);
    for (size_t i = 0; i < counts[1]; ++i) out.val.push_back(shuffled[pos++]);
    for (size_t i = 0; i < counts[2]; ++i) out.test.push_back(shuffled[pos++]);
    return out;
}

void write_manifest(const std::string& path, const std::vector<ManifestEntry>& entries) {
    CsvTable t;
    t.header = {"id", "image", "annotation"};
    for (const auto& e : entries) t.rows.push_back({e.id, e.image, e.annotation});
    write_csv(path, t);
}

std::vector<ManifestEntry> read_manifest(const std::string& path) {
    const auto t = read_csv(path);
    if (t.header != std::vector<std::string>{"id", "image", "annotation"})
        throw std::runtime_error("read_manifest: unexpected header in " + path);
    std::vector<ManifestEntry> out;
    for (const auto& r : t.rows) out.push_back({r[0], r[1], r[2]});
    return out;
}

std::vector<ManifestEntry> generate_dataset(const GenSpec& spec, const std::string& out_dir) {
    namespace fs = std::filesystem;
    fs::create_directories(fs::path(out_dir) / "images");
    fs::create_directories(fs::path(out_dir) / "annotations");
    std::vector<ManifestEntry> entries;
    for (int i = 0; i < spec.count; ++i) {
        const auto sample = generate_sample(spec.seed, i, spec);
        ManifestEntry e;
        e.id = sample.image_id;
        e.image = "images/" + sample.image_id + ".png";
        e.annotation = "annotations/" + sample.image_id + ".xml";
        write_png((fs::path(out_dir) / e.image).string(), tensor_to_u8(sample.image));
        write_voc_xml((fs::path(out_dir) / e.annotation).string(), sample.image_id, spec.size, spec.size,
                      sample.labels);
        entries.push_back(e);
    }
    write_manifest((fs::path(out_dir) / "manifest.csv").string(), entries);

    std::vector<std::string> ids;
    for (const auto& e : entries) ids.push_back(e.id);
    const Split split = split_dataset(ids, {8, 1, 1}, spec.seed);
    auto write_ids = [&](const std::string& name, const std::vector<std::string>& v) {
        CsvTable t;
        t.header = {"id"};
        for (const auto& id : v) t.rows.push_back({id});
        write_csv((fs::path(out_dir) / name).string(), t);
    };
    write_ids("split_train.csv", split.train);
    write_ids("split_val.csv", split.val);
    write_ids("split_test.csv", split.test);
    return entries;
}

DatasetSample load_sample(const std::string& base_dir, const ManifestEntry& entry) {
    namespace fs = std::filesystem;
    DatasetSample s;
    s.image_id = entry.id;
    s.image = u8_to_tensor(read_png((fs::path(base_dir) / entry.image).string()));
    s.labels = read_voc_xml((fs::path(base_dir) / entry.annotation).string());
    return s;
}

} // namespace ddet

#include "disc/domain_forge.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include <zlib.h>

#include "disc/rng.hpp"
#include "disc/serialize.hpp"

namespace fs = std::filesystem;

namespace disc {

void DatasetSpec::validate() const {
    if (n_classes < 2) throw ConfigError("dataset spec: need at least 2 classes");
    if (n_classes > 8) throw ConfigError("dataset spec: glyph catalogue supports at most 8 classes");
    if (channels != 3) throw ConfigError("dataset spec: images are RGB (3 channels)");
    if (height < 16 || width < 16)
        throw ConfigError("dataset spec: image too small for glyph rendering (min 16x16)");
    if (train_count <= 0 || val_count <= 0 || test_count <= 0)
        throw ConfigError("dataset spec: split counts must be positive");
}

std::string weather_name(Weather w) {
    switch (w) {
        case Weather::clear: return "clear";
        case Weather::fog: return "fog";
        case Weather::rain: return "rain";
        case Weather::snow: return "snow";
    }
    throw ConfigError("unknown weather kind");
}

Weather weather_from_name(const std::string& name) {
    if (name == "clear") return Weather::clear;
    if (name == "fog") return Weather::fog;
    if (name == "rain") return Weather::rain;
    if (name == "snow") return Weather::snow;
    throw ConfigError("unknown weather kind '" + name + "'");
}

const Task& TaskSequence::at(const std::string& task_id) const {
    for (const Task& t : tasks)
        if (t.task_id == task_id) return t;
    throw ProtocolError("task sequence has no task '" + task_id + "'");
}

int TaskSequence::index_of(const std::string& task_id) const {
    for (std::size_t i = 0; i < tasks.size(); ++i)
        if (tasks[i].task_id == task_id) return static_cast<int>(i);
    return -1;
}

Tensor image_at(const Tensor& images, int index) {
    const int C = images.dim(1), H = images.dim(2), W = images.dim(3);
    Tensor out({C, H, W});
    const std::size_t n = out.data.size();
    std::copy_n(images.data.data() + static_cast<std::size_t>(index) * n, n, out.data.data());
    return out;
}

// ---------------------------------------------------------------------------
// base dataset generation

namespace {

constexpr double kTau = 6.28318530717958647692;

enum SplitTag : std::uint64_t { kTrainTag = 1, kValTag = 2, kTestTag = 3 };

struct Wave {
    double amp, fx, fy, phase;
};

bool glyph_inside(int shape, double ux, double uy) {
    switch (shape) {
        case 0:  // disk
            return ux * ux + uy * uy <= 1.0;
        case 1: {  // dumbbell: two disjoint blobs
            const double d1 = (ux - 0.55) * (ux - 0.55) + uy * uy;
            const double d2 = (ux + 0.55) * (ux + 0.55) + uy * uy;
            return std::min(d1, d2) <= 0.45 * 0.45;
        }
        case 2: {  // equilateral triangle, apex up
            const double x0 = 0.0, y0 = 1.0;
            const double x1 = -0.8660254037844386, y1 = -0.5;
            const double x2 = 0.8660254037844386, y2 = -0.5;
            auto side = [&](double ax, double ay, double bx, double by) {
                return (bx - ax) * (uy - ay) - (by - ay) * (ux - ax);
            };
            const double c0 = side(x0, y0, x1, y1);
            const double c1 = side(x1, y1, x2, y2);
            const double c2 = side(x2, y2, x0, y0);
            return (c0 <= 0 && c1 <= 0 && c2 <= 0) || (c0 >= 0 && c1 >= 0 && c2 >= 0);
        }
        case 3:  // cross
            return (std::abs(ux) <= 0.35 && std::abs(uy) <= 1.0) ||
                   (std::abs(uy) <= 0.35 && std::abs(ux) <= 1.0);
        default:
            return false;
    }
}

void render_image(float* out, int C, int H, int W, int label, Rng& rng) {
    // background: per-channel base tone plus two low-frequency waves
    double base[3];
    Wave waves[3][2];
    for (int c = 0; c < C; ++c) {
        base[c] = rng.uniform(0.12, 0.32);
        for (int k = 0; k < 2; ++k) {
            waves[c][k].amp = rng.uniform(0.02, 0.07);
            waves[c][k].fx = rng.uniform(0.5, 2.5) * kTau / W;
            waves[c][k].fy = rng.uniform(0.5, 2.5) * kTau / H;
            waves[c][k].phase = rng.uniform(0.0, kTau);
        }
    }
    // glyph placement
    const int shape = label % 4;
    const int fill = (label / 4) % 2;  // 0 solid, 1 outline
    const double cx = rng.uniform(0.36, 0.64) * W;
    const double cy = rng.uniform(0.36, 0.64) * H;
    const double radius = rng.uniform(0.24, 0.34) * std::min(H, W);
    const double theta = rng.uniform(0.0, kTau);
    const double ct = std::cos(theta), st = std::sin(theta);
    double color[3];
    for (int c = 0; c < C; ++c) color[c] = rng.uniform(0.85, 0.99);

    // shared luminance noise
    std::vector<float> noise(static_cast<std::size_t>(H) * W);
    for (auto& v : noise) v = static_cast<float>(rng.uniform(-0.02, 0.02));

    for (int y = 0; y < H; ++y) {
        for (int x = 0; x < W; ++x) {
            const double dx = (x + 0.5 - cx) / radius;
            const double dy = (y + 0.5 - cy) / radius;
            // rotate into the glyph frame
            const double ux = ct * dx + st * dy;
            const double uy = -st * dx + ct * dy;
            bool paint = glyph_inside(shape, ux, uy);
            if (paint && fill == 1) {
                // outline fill: hollow out a scaled-down copy of the shape
                paint = !glyph_inside(shape, ux / 0.58, uy / 0.58);
            }
            for (int c = 0; c < C; ++c) {
                double v;
                if (paint) {
                    v = color[c];
                } else {
                    v = base[c];
                    for (int k = 0; k < 2; ++k)
                        v += waves[c][k].amp *
                             std::sin(waves[c][k].fx * x + waves[c][k].fy * y + waves[c][k].phase);
                    v += noise[static_cast<std::size_t>(y) * W + x];
                }
                v = std::clamp(v, 0.0, 1.0);
                out[(static_cast<std::size_t>(c) * H + y) * W + x] = static_cast<float>(v);
            }
        }
    }
}

Split gen_split(const DatasetSpec& spec, int count, std::uint64_t split_tag) {
    Split s;
    s.images = Tensor({count, spec.channels, spec.height, spec.width});
    s.labels.resize(static_cast<std::size_t>(count));
    const std::size_t img = static_cast<std::size_t>(spec.channels) * spec.height * spec.width;
    for (int i = 0; i < count; ++i) {
        const int label = i % spec.n_classes;  // balanced within +-1
        s.labels[static_cast<std::size_t>(i)] = label;
        Rng rng(mix_seed(mix_seed(spec.seed, split_tag), static_cast<std::uint64_t>(i)));
        render_image(s.images.data.data() + static_cast<std::size_t>(i) * img, spec.channels,
                     spec.height, spec.width, label, rng);
    }
    return s;
}

}  // namespace

Dataset gen_base(const DatasetSpec& spec) {
    spec.validate();
    Dataset d;
    d.spec = spec;
    d.train = gen_split(spec, spec.train_count, kTrainTag);
    d.val = gen_split(spec, spec.val_count, kValTag);
    d.test = gen_split(spec, spec.test_count, kTestTag);
    return d;
}

// ---------------------------------------------------------------------------
// corruptions

void apply_fog(Tensor& image, float severity) {
    if (severity == 0.0f) return;
    const int C = image.dim(0), H = image.dim(1), W = image.dim(2);
    const float haze = 0.9f;
    for (int y = 0; y < H; ++y) {
        const float g = (H > 1) ? 1.0f - static_cast<float>(y) / (H - 1) : 1.0f;
        const float a = severity * (0.5f + 0.5f * g);
        for (int c = 0; c < C; ++c) {
            float* row = image.data.data() + (static_cast<std::size_t>(c) * H + y) * W;
            for (int x = 0; x < W; ++x) row[x] = (1.0f - a) * row[x] + a * haze;
        }
    }
}

void apply_rain(Tensor& image, float severity, std::uint64_t seed) {
    if (severity == 0.0f) return;
    const int C = image.dim(0), H = image.dim(1), W = image.dim(2);
    Rng rng(mix_seed(seed, 0x7261696eull));  // "rain"
    const int n_streaks = static_cast<int>(std::lround(severity * 60.0));
    const double angle = rng.uniform(60.0, 80.0) * kTau / 360.0;
    const double dx = std::cos(angle), dy = std::sin(angle);
    const float alpha = 0.45f;
    for (int s = 0; s < n_streaks; ++s) {
        const double x0 = rng.uniform(0.0, static_cast<double>(W));
        const double y0 = rng.uniform(0.0, static_cast<double>(H));
        const double len = rng.uniform(0.25, 0.5) * H;
        int last = -1;
        for (double t = 0.0; t <= len; t += 0.7) {
            const int px = static_cast<int>(x0 + t * dx);
            const int py = static_cast<int>(y0 + t * dy);
            if (px < 0 || px >= W || py < 0 || py >= H) continue;
            const int idx = py * W + px;
            if (idx == last) continue;
            last = idx;
            for (int c = 0; c < C; ++c) {
                float& v = image.data[static_cast<std::size_t>(c) * H * W + idx];
                v = (1.0f - alpha) * v + alpha * 1.0f;
            }
        }
    }
    // mild blur, blended in proportion to severity
    const float b = 0.5f * severity;
    Tensor blurred(image.shape);
    for (int c = 0; c < C; ++c) {
        const float* src = image.data.data() + static_cast<std::size_t>(c) * H * W;
        float* dst = blurred.data.data() + static_cast<std::size_t>(c) * H * W;
        for (int y = 0; y < H; ++y) {
            for (int x = 0; x < W; ++x) {
                float sum = 0.0f;
                int cnt = 0;
                for (int oy = -1; oy <= 1; ++oy)
                    for (int ox = -1; ox <= 1; ++ox) {
                        const int yy = y + oy, xx = x + ox;
                        if (yy < 0 || yy >= H || xx < 0 || xx >= W) continue;
                        sum += src[yy * W + xx];
                        ++cnt;
                    }
                dst[y * W + x] = sum / cnt;
            }
        }
    }
    for (std::size_t i = 0; i < image.data.size(); ++i)
        image.data[i] = (1.0f - b) * image.data[i] + b * blurred.data[i];
}

void apply_snow(Tensor& image, float severity, std::uint64_t seed) {
    if (severity == 0.0f) return;
    const int C = image.dim(0), H = image.dim(1), W = image.dim(2);
    Rng rng(mix_seed(seed, 0x736e6f77ull));  // "snow"
    const int target = static_cast<int>(std::lround(severity * 0.10 * H * W));
    std::vector<std::uint8_t> white(static_cast<std::size_t>(H) * W, 0);
    int painted = 0;
    auto paint = [&](int x, int y) {
        if (x < 0 || x >= W || y < 0 || y >= H) return;
        std::uint8_t& flag = white[static_cast<std::size_t>(y) * W + x];
        if (flag) return;
        flag = 1;
        ++painted;
        for (int c = 0; c < C; ++c)
            image.data[(static_cast<std::size_t>(c) * H + y) * W + x] = 1.0f;
    };
    while (painted < target) {
        const int x = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(W)));
        const int y = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(H)));
        paint(x, y);
        if (rng.uniform() < 0.6) {
            // grow the flake to 2 px
            const int pick = static_cast<int>(rng.uniform_int(3));
            const int nx = x + (pick == 0 || pick == 2 ? 1 : 0);
            const int ny = y + (pick == 1 || pick == 2 ? 1 : 0);
            paint(nx, ny);
        }
    }
    const float lift = severity * 0.15f;
    for (std::size_t i = 0; i < image.data.size(); ++i) {
        const std::size_t pix = i % (static_cast<std::size_t>(H) * W);
        if (white[pix]) continue;  // flakes stay exactly white
        image.data[i] = std::min(1.0f, image.data[i] + lift);
    }
}

void apply_domain(Tensor& image, const DomainSpec& domain, std::uint64_t image_seed) {
    const DomainSpec d = domain.normalized();
    d.validate();
    switch (d.kind) {
        case Weather::clear: return;
        case Weather::fog: apply_fog(image, d.severity); return;
        case Weather::rain: apply_rain(image, d.severity, image_seed); return;
        case Weather::snow: apply_snow(image, d.severity, image_seed); return;
    }
}

namespace {

Split corrupt_split(const Split& base, const DomainSpec& domain, std::uint64_t split_tag) {
    Split out;
    out.labels = base.labels;  // label invariance by construction
    out.images = base.images;
    if (domain.normalized().kind == Weather::clear) return out;
    const int n = base.count();
    const int C = base.images.dim(1), H = base.images.dim(2), W = base.images.dim(3);
    const std::size_t img = static_cast<std::size_t>(C) * H * W;
    for (int i = 0; i < n; ++i) {
        Tensor one({C, H, W});
        std::copy_n(out.images.data.data() + static_cast<std::size_t>(i) * img, img,
                    one.data.data());
        apply_domain(one, domain,
                     mix_seed(mix_seed(domain.seed, split_tag), static_cast<std::uint64_t>(i)));
        std::copy_n(one.data.data(), img, out.images.data.data() + static_cast<std::size_t>(i) * img);
    }
    return out;
}

}  // namespace

TaskSequence make_sequence(const Dataset& base, const std::vector<DomainSpec>& domains) {
    if (domains.empty()) throw ConfigError("make_sequence: need at least one domain spec");
    if (domains.front().kind != Weather::clear)
        throw ConfigError("make_sequence: the first task must be clear");
    TaskSequence seq;
    seq.n_classes = base.spec.n_classes;
    for (const DomainSpec& raw : domains) {
        const DomainSpec d = raw.normalized();
        d.validate();
        Task t;
        t.task_id = d.task_id();
        if (seq.index_of(t.task_id) >= 0)
            throw ConfigError("make_sequence: duplicate task id '" + t.task_id + "'");
        t.domain = d;
        t.train = corrupt_split(base.train, d, kTrainTag);
        t.val = corrupt_split(base.val, d, kValTag);
        t.test = corrupt_split(base.test, d, kTestTag);
        seq.tasks.push_back(std::move(t));
    }
    return seq;
}

// ---------------------------------------------------------------------------
// persistence

namespace {
constexpr char kSplitMagic[9] = "DISCDSET";
constexpr std::uint16_t kSplitVersion = 1;
}  // namespace

void save_split(const Split& split, const std::string& path) {
    ByteWriter w;
    w.bytes(kSplitMagic, 8);
    w.u16(kSplitVersion);
    const int n = split.count();
    w.u32(static_cast<std::uint32_t>(n));
    w.u32(static_cast<std::uint32_t>(split.images.dim(1)));
    w.u32(static_cast<std::uint32_t>(split.images.dim(2)));
    w.u32(static_cast<std::uint32_t>(split.images.dim(3)));
    w.str16("images");
    w.u64(split.images.data.size());
    w.f32_array(split.images.data);
    w.str16("labels");
    w.u64(split.labels.size());
    for (int v : split.labels) w.u16(static_cast<std::uint16_t>(v));
    w.write_file(path);
}

Split load_split(const std::string& path) {
    ByteReader r = ByteReader::from_file(path);
    r.expect_magic(kSplitMagic);
    if (r.u16() != kSplitVersion) r.fail("unsupported dataset version");
    const int n = static_cast<int>(r.u32());
    const int c = static_cast<int>(r.u32());
    const int h = static_cast<int>(r.u32());
    const int w = static_cast<int>(r.u32());
    if (n <= 0 || c <= 0 || h <= 0 || w <= 0) r.fail("implausible split dimensions");
    if (r.str16() != "images") r.fail("expected images record");
    const std::uint64_t count = r.u64();
    if (count != static_cast<std::uint64_t>(n) * c * h * w) r.fail("image record count mismatch");
    Split s;
    s.images = Tensor({n, c, h, w}, r.f32_array(static_cast<std::size_t>(count)));
    if (r.str16() != "labels") r.fail("expected labels record");
    if (r.u64() != static_cast<std::uint64_t>(n)) r.fail("label record count mismatch");
    s.labels.resize(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) s.labels[static_cast<std::size_t>(i)] = r.u16();
    r.require_end();
    return s;
}

namespace {

std::map<std::string, std::string> parse_kv_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw DataError("cannot open manifest: " + path);
    std::map<std::string, std::string> kv;
    std::string line;
    while (std::getline(f, line)) {
        const auto eq = line.find('=');
        if (eq == std::string::npos) continue;
        std::string key = line.substr(0, eq);
        std::string val = line.substr(eq + 1);
        auto trim = [](std::string& s) {
            const auto b = s.find_first_not_of(" \t");
            const auto e = s.find_last_not_of(" \t\r");
            s = (b == std::string::npos) ? "" : s.substr(b, e - b + 1);
        };
        trim(key);
        trim(val);
        kv[key] = val;
    }
    return kv;
}

}  // namespace

void save_sequence(const TaskSequence& seq, const DatasetSpec& spec, const std::string& dir,
                   bool force) {
    fs::path root(dir);
    if (fs::exists(root) && !fs::is_empty(root) && !force)
        throw ConfigError("output directory exists and is not empty (use force): " + dir);
    fs::create_directories(root);

    std::ostringstream top;
    top << "format = disc-dataset\n"
        << "version = 1\n"
        << "seed = " << spec.seed << "\n"
        << "n_classes = " << spec.n_classes << "\n"
        << "channels = " << spec.channels << "\n"
        << "height = " << spec.height << "\n"
        << "width = " << spec.width << "\n"
        << "train_count = " << spec.train_count << "\n"
        << "val_count = " << spec.val_count << "\n"
        << "test_count = " << spec.test_count << "\n";
    top << "tasks = ";
    for (std::size_t i = 0; i < seq.tasks.size(); ++i) {
        if (i) top << ",";
        top << seq.tasks[i].task_id;
    }
    top << "\n";
    {
        std::ofstream f(root / "manifest.txt", std::ios::trunc);
        f << top.str();
    }

    for (const Task& t : seq.tasks) {
        const fs::path tdir = root / t.task_id;
        fs::create_directories(tdir);
        std::ostringstream man;
        man << "task_id = " << t.task_id << "\n"
            << "kind = " << weather_name(t.domain.kind) << "\n"
            << "severity = " << t.domain.severity << "\n"
            << "seed = " << t.domain.seed << "\n"
            << "n_classes = " << seq.n_classes << "\n"
            << "train_count = " << t.train.count() << "\n"
            << "val_count = " << t.val.count() << "\n"
            << "test_count = " << t.test.count() << "\n";
        man << "labels = ";
        for (int c = 0; c < seq.n_classes; ++c) {
            if (c) man << ",";
            man << c;
        }
        man << "\n";
        {
            std::ofstream f(tdir / "manifest.txt", std::ios::trunc);
            f << man.str();
        }
        save_split(t.train, (tdir / "train.bin").string());
        save_split(t.val, (tdir / "val.bin").string());
        save_split(t.test, (tdir / "test.bin").string());
    }
}

TaskSequence load_sequence(const std::string& dir) {
    fs::path root(dir);
    auto top = parse_kv_file((root / "manifest.txt").string());
    TaskSequence seq;
    seq.n_classes = std::stoi(top.at("n_classes"));
    std::stringstream tasks(top.at("tasks"));
    std::string id;
    while (std::getline(tasks, id, ',')) {
        const fs::path tdir = root / id;
        auto man = parse_kv_file((tdir / "manifest.txt").string());
        Task t;
        t.task_id = man.at("task_id");
        t.domain.kind = weather_from_name(man.at("kind"));
        t.domain.severity = std::stof(man.at("severity"));
        t.domain.seed = std::stoull(man.at("seed"));
        t.train = load_split((tdir / "train.bin").string());
        t.val = load_split((tdir / "val.bin").string());
        t.test = load_split((tdir / "test.bin").string());
        seq.tasks.push_back(std::move(t));
    }
    if (seq.tasks.empty()) throw DataError("dataset directory lists no tasks: " + dir);
    return seq;
}

// ---------------------------------------------------------------------------
// PNG export

namespace {

void png_chunk(std::vector<unsigned char>& out, const char type[4],
               const std::vector<unsigned char>& payload) {
    auto push_u32 = [&](std::uint32_t v) {
        out.push_back(static_cast<unsigned char>(v >> 24));
        out.push_back(static_cast<unsigned char>(v >> 16));
        out.push_back(static_cast<unsigned char>(v >> 8));
        out.push_back(static_cast<unsigned char>(v));
    };
    push_u32(static_cast<std::uint32_t>(payload.size()));
    const std::size_t start = out.size();
    out.insert(out.end(), type, type + 4);
    out.insert(out.end(), payload.begin(), payload.end());
    const auto crc =
        crc32(0L, out.data() + start, static_cast<uInt>(out.size() - start));
    push_u32(static_cast<std::uint32_t>(crc));
}

}  // namespace

void write_png_rgb(const Tensor& image, const std::string& path) {
    if (image.ndim() != 3 || image.dim(0) != 3)
        throw ShapeError("write_png_rgb: expected [3, H, W] image");
    const int H = image.dim(1), W = image.dim(2);

    std::vector<unsigned char> raw(static_cast<std::size_t>(H) * (1 + 3 * W));
    for (int y = 0; y < H; ++y) {
        unsigned char* row = raw.data() + static_cast<std::size_t>(y) * (1 + 3 * W);
        row[0] = 0;  // filter: none
        for (int x = 0; x < W; ++x)
            for (int c = 0; c < 3; ++c) {
                const float v = std::clamp(
                    image.data[(static_cast<std::size_t>(c) * H + y) * W + x], 0.0f, 1.0f);
                row[1 + 3 * x + c] = static_cast<unsigned char>(std::lround(v * 255.0f));
            }
    }

    uLongf comp_len = compressBound(static_cast<uLong>(raw.size()));
    std::vector<unsigned char> comp(comp_len);
    if (compress2(comp.data(), &comp_len, raw.data(), static_cast<uLong>(raw.size()), 6) != Z_OK)
        throw DataError("png: deflate failed");
    comp.resize(comp_len);

    std::vector<unsigned char> out = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
    std::vector<unsigned char> ihdr(13);
    auto be32 = [](unsigned char* p, std::uint32_t v) {
        p[0] = static_cast<unsigned char>(v >> 24);
        p[1] = static_cast<unsigned char>(v >> 16);
        p[2] = static_cast<unsigned char>(v >> 8);
        p[3] = static_cast<unsigned char>(v);
    };
    be32(ihdr.data(), static_cast<std::uint32_t>(W));
    be32(ihdr.data() + 4, static_cast<std::uint32_t>(H));
    ihdr[8] = 8;   // bit depth
    ihdr[9] = 2;   // color type: RGB
    ihdr[10] = 0;  // compression
    ihdr[11] = 0;  // filter
    ihdr[12] = 0;  // interlace
    png_chunk(out, "IHDR", ihdr);
    png_chunk(out, "IDAT", comp);
    png_chunk(out, "IEND", {});

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw DataError("cannot open for writing: " + path);
    f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
}

}  // namespace disc

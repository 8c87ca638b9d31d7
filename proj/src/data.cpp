#include "dcswin/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

namespace dcswin {

namespace fs = std::filesystem;

void validate_sample(const Sample& s, int classes, int32_t ignore_label)
{
    if (s.image.ndim() != 3 || s.image.dim(0) != 3) {
        throw Error("sample " + s.id + ": image must be [3, H, W], got " + to_string(s.image.shape()));
    }
    if (static_cast<int64_t>(s.label.size()) != s.height() * s.width()) {
        throw Error("sample " + s.id + ": label map does not match the image size");
    }
    for (float v : s.image.data()) {
        if (!(v >= 0.0f && v <= 1.0f)) throw Error("sample " + s.id + ": image value outside [0, 1]");
    }
    for (int32_t l : s.label) {
        if (l != ignore_label && (l < 0 || l >= classes)) {
            throw Error("sample " + s.id + ": label " + std::to_string(l) + " outside [0, " + std::to_string(classes) +
                        ")");
        }
    }
}

// ---- netpbm ------------------------------------------------------------------

namespace {

struct PnmHeader {
    int64_t width = 0, height = 0, maxval = 0;
};

PnmHeader read_pnm_header(std::istream& in, const std::string& magic, const fs::path& path)
{
    auto token = [&]() {
        std::string t;
        char c;
        while (in.get(c)) {
            if (c == '#') {
                std::string rest;
                std::getline(in, rest);
                continue;
            }
            if (std::isspace(static_cast<unsigned char>(c))) {
                if (!t.empty()) break;
                continue;
            }
            t.push_back(c);
        }
        return t;
    };
    if (token() != magic) throw Error(path.string() + ": not a binary " + magic + " file");
    PnmHeader h;
    try {
        h.width = std::stoll(token());
        h.height = std::stoll(token());
        h.maxval = std::stoll(token());
    } catch (const std::exception&) {
        throw Error(path.string() + ": malformed header");
    }
    if (h.width <= 0 || h.height <= 0 || h.maxval <= 0 || h.maxval > 255) {
        throw Error(path.string() + ": unsupported size or maxval (8-bit only)");
    }
    return h;
}

std::vector<uint8_t> read_payload(std::istream& in, std::size_t n, const fs::path& path)
{
    std::vector<uint8_t> buf(n);
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in.gcount()) != n) throw Error(path.string() + ": truncated pixel data");
    return buf;
}

std::ofstream open_out(const fs::path& path)
{
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write " + path.string());
    return out;
}

}  // namespace

Tensor32 read_ppm(const fs::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open " + path.string());
    const auto h = read_pnm_header(in, "P6", path);
    const auto buf = read_payload(in, static_cast<std::size_t>(h.width * h.height * 3), path);
    auto img = Tensor32::zeros({3, h.height, h.width});
    auto d = img.mutable_data();
    const int64_t plane = h.width * h.height;
    for (int64_t i = 0; i < plane; ++i)
        for (int c = 0; c < 3; ++c) d[c * plane + i] = float(buf[i * 3 + c]) / float(h.maxval);
    return img;
}

void write_ppm_rgb(const fs::path& path, int64_t height, int64_t width, const std::vector<uint8_t>& rgb)
{
    if (static_cast<int64_t>(rgb.size()) != height * width * 3) throw Error("write_ppm: buffer size mismatch");
    auto out = open_out(path);
    out << "P6\n" << width << ' ' << height << "\n255\n";
    out.write(reinterpret_cast<const char*>(rgb.data()), static_cast<std::streamsize>(rgb.size()));
}

void write_ppm(const fs::path& path, const Tensor32& image)
{
    if (image.ndim() != 3 || image.dim(0) != 3) throw Error("write_ppm expects [3, H, W]");
    const int64_t H = image.dim(1), W = image.dim(2), plane = H * W;
    std::vector<uint8_t> rgb(static_cast<std::size_t>(plane * 3));
    const auto d = image.data();
    for (int64_t i = 0; i < plane; ++i)
        for (int c = 0; c < 3; ++c) {
            const float v = std::clamp(d[c * plane + i], 0.0f, 1.0f);
            rgb[i * 3 + c] = static_cast<uint8_t>(std::lround(v * 255.0f));
        }
    write_ppm_rgb(path, H, W, rgb);
}

std::vector<int32_t> read_pgm(const fs::path& path, int64_t& height, int64_t& width)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open " + path.string());
    const auto h = read_pnm_header(in, "P5", path);
    const auto buf = read_payload(in, static_cast<std::size_t>(h.width * h.height), path);
    height = h.height;
    width = h.width;
    return std::vector<int32_t>(buf.begin(), buf.end());
}

void write_pgm(const fs::path& path, int64_t height, int64_t width, const std::vector<int32_t>& labels)
{
    if (static_cast<int64_t>(labels.size()) != height * width) throw Error("write_pgm: buffer size mismatch");
    std::vector<uint8_t> buf(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0 || labels[i] > 255) throw Error("write_pgm: label outside 0..255");
        buf[i] = static_cast<uint8_t>(labels[i]);
    }
    auto out = open_out(path);
    out << "P5\n" << width << ' ' << height << "\n255\n";
    out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

// ---- dataset -----------------------------------------------------------------

std::vector<Sample> load_dataset(const fs::path& root)
{
    const auto manifest = root / "manifest.tsv";
    std::ifstream in(manifest);
    if (!in) throw Error("cannot open " + manifest.string());
    std::vector<Sample> out;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line[0] == '#') continue;
        std::istringstream fields(line);
        std::string id, image, label;
        if (!std::getline(fields, id, '\t') || !std::getline(fields, image, '\t') || !std::getline(fields, label)) {
            throw Error(manifest.string() + ":" + std::to_string(lineno) + ": expected id, image, label columns");
        }
        if (lineno == 1 && id == "id" && image == "image") continue;
        Sample s;
        s.id = id;
        s.image = read_ppm(root / image);
        int64_t h = 0, w = 0;
        s.label = read_pgm(root / label, h, w);
        if (h != s.height() || w != s.width()) throw Error("sample " + id + ": label size differs from image size");
        out.push_back(std::move(s));
    }
    if (out.empty()) throw Error(manifest.string() + " lists no samples");
    return out;
}

void save_dataset(const fs::path& root, const std::vector<Sample>& samples)
{
    fs::create_directories(root / "images");
    fs::create_directories(root / "labels");
    auto manifest = open_out(root / "manifest.tsv");
    manifest << "id\timage\tlabel\n";
    for (const auto& s : samples) {
        const std::string image = "images/" + s.id + ".ppm", label = "labels/" + s.id + ".pgm";
        write_ppm(root / image, s.image);
        write_pgm(root / label, s.height(), s.width(), s.label);
        manifest << s.id << '\t' << image << '\t' << label << '\n';
    }
}

// ---- tiling --------------------------------------------------------------------

void TileSpec::validate() const
{
    if (tile <= 0) throw Error("data.tile must be positive");
    if (stride <= 0 || stride > tile) throw Error("data.stride must lie in (0, tile]");
}

std::vector<TileOrigin> tile_origins(int64_t height, int64_t width, const TileSpec& spec)
{
    spec.validate();
    auto axis = [&](int64_t extent) {
        std::vector<int64_t> starts{0};
        if (extent <= spec.tile) return starts;
        while (starts.back() + spec.tile < extent) starts.push_back(std::min(starts.back() + spec.stride, extent - spec.tile));
        return starts;
    };
    std::vector<TileOrigin> out;
    for (int64_t y : axis(height))
        for (int64_t x : axis(width)) out.push_back({y, x});
    return out;
}

int64_t reflect_index(int64_t i, int64_t n)
{
    if (n == 1) return 0;
    const int64_t period = 2 * (n - 1);
    i %= period;
    if (i < 0) i += period;
    return i < n ? i : period - i;
}

Tensor32 crop_image(const Tensor32& image, const TileOrigin& o, int64_t tile)
{
    const int64_t H = image.dim(1), W = image.dim(2);
    auto out = Tensor32::zeros({3, tile, tile});
    auto d = out.mutable_data();
    const auto src = image.data();
    for (int64_t c = 0; c < 3; ++c)
        for (int64_t y = 0; y < tile; ++y) {
            const int64_t sy = reflect_index(o.y + y, H);
            for (int64_t x = 0; x < tile; ++x) d[(c * tile + y) * tile + x] = src[(c * H + sy) * W + reflect_index(o.x + x, W)];
        }
    return out;
}

Sample crop_tile(const Sample& s, const TileOrigin& o, int64_t tile, int32_t ignore_label)
{
    Sample t;
    t.id = s.id + "_y" + std::to_string(o.y) + "_x" + std::to_string(o.x);
    t.image = crop_image(s.image, o, tile);
    t.label.assign(static_cast<std::size_t>(tile * tile), ignore_label);
    const int64_t H = s.height(), W = s.width();
    for (int64_t y = 0; y < tile && o.y + y < H; ++y)
        for (int64_t x = 0; x < tile && o.x + x < W; ++x) t.label[y * tile + x] = s.label[(o.y + y) * W + o.x + x];
    return t;
}

std::vector<Sample> tile_sample(const Sample& s, const TileSpec& spec, std::vector<TileOrigin>* origins,
                                int32_t ignore_label)
{
    const auto where = tile_origins(s.height(), s.width(), spec);
    std::vector<Sample> out;
    for (const auto& o : where) out.push_back(crop_tile(s, o, spec.tile, ignore_label));
    if (origins) *origins = where;
    return out;
}

Stitcher::Stitcher(int classes, int64_t height, int64_t width)
    : classes_(classes), height_(height), width_(width),
      sum_(static_cast<std::size_t>(classes * height * width), 0.0), hits_(static_cast<std::size_t>(height * width), 0)
{
}

void Stitcher::add(const TileOrigin& o, const Tensor32& t)
{
    if (t.ndim() != 3 || t.dim(0) != classes_) throw Error("stitch: tile logits must be [K, t, t]");
    const int64_t th = t.dim(1), tw = t.dim(2);
    const auto d = t.data();
    for (int64_t y = 0; y < th && o.y + y < height_; ++y)
        for (int64_t x = 0; x < tw && o.x + x < width_; ++x) {
            const int64_t p = (o.y + y) * width_ + o.x + x;
            ++hits_[p];
            for (int k = 0; k < classes_; ++k) sum_[k * height_ * width_ + p] += d[(k * th + y) * tw + x];
        }
}

Tensor32 Stitcher::logits() const
{
    auto out = Tensor32::zeros({classes_, height_, width_});
    auto d = out.mutable_data();
    const int64_t plane = height_ * width_;
    for (int64_t p = 0; p < plane; ++p) {
        if (hits_[p] == 0) throw Error("stitch: pixel " + std::to_string(p) + " was not covered by any tile");
        for (int k = 0; k < classes_; ++k) d[k * plane + p] = static_cast<float>(sum_[k * plane + p] / hits_[p]);
    }
    return out;
}

std::vector<int32_t> Stitcher::argmax() const { return argmax_labels(logits()); }

std::vector<int32_t> stitch_labels(const std::vector<std::vector<int32_t>>& tiles, const std::vector<TileOrigin>& origins,
                                   int64_t tile, int64_t height, int64_t width)
{
    if (tiles.size() != origins.size()) throw Error("stitch: tile and origin counts differ");
    std::vector<int32_t> out(static_cast<std::size_t>(height * width), -1);
    for (std::size_t i = 0; i < tiles.size(); ++i) {
        const auto& o = origins[i];
        for (int64_t y = 0; y < tile && o.y + y < height; ++y)
            for (int64_t x = 0; x < tile && o.x + x < width; ++x) out[(o.y + y) * width + o.x + x] = tiles[i][y * tile + x];
    }
    return out;
}

std::vector<int32_t> argmax_labels(const Tensor32& logits)
{
    const int64_t K = logits.dim(0), plane = logits.dim(1) * logits.dim(2);
    const auto d = logits.data();
    std::vector<int32_t> out(static_cast<std::size_t>(plane), 0);
    for (int64_t p = 0; p < plane; ++p) {
        float best = d[p];
        for (int64_t k = 1; k < K; ++k) {
            if (d[k * plane + p] > best) {
                best = d[k * plane + p];
                out[p] = static_cast<int32_t>(k);
            }
        }
    }
    return out;
}

// ---- synthetic scenes -----------------------------------------------------------

std::array<uint8_t, 3> label_color(int k)
{
    static constexpr std::array<std::array<uint8_t, 3>, 8> palette{{
        {255, 255, 255},
        {0, 0, 255},
        {0, 255, 255},
        {0, 255, 0},
        {255, 255, 0},
        {255, 0, 0},
        {255, 0, 255},
        {255, 128, 0},
    }};
    if (k < 0) throw Error("label_color: negative class " + std::to_string(k));
    if (k < 8) return palette[std::size_t(k)];
    const auto g = static_cast<uint8_t>(255 - (16 * (k - 8)) % 256);
    return {g, g, g};
}

std::vector<uint8_t> colorize(const std::vector<int32_t>& labels)
{
    std::vector<uint8_t> rgb;
    rgb.reserve(labels.size() * 3);
    for (const int32_t l : labels) {
        const auto c = label_color(l);
        rgb.insert(rgb.end(), c.begin(), c.end());
    }
    return rgb;
}

std::array<float, 3> synth_class_color(int k)
{
    static constexpr std::array<std::array<float, 3>, 8> palette{{
        {0.55f, 0.55f, 0.55f},  // paved grey
        {0.80f, 0.30f, 0.25f},  // roof red
        {0.50f, 0.80f, 0.35f},  // grass
        {0.10f, 0.40f, 0.15f},  // canopy
        {0.90f, 0.85f, 0.20f},  // vehicle yellow
        {0.20f, 0.30f, 0.80f},  // water blue
        {0.85f, 0.55f, 0.85f},
        {0.15f, 0.15f, 0.15f},
    }};
    if (k < 0 || k >= 8) throw Error("synthetic palette holds 8 classes");
    return palette[static_cast<std::size_t>(k)];
}

Sample synth_scene(uint64_t seed, int64_t size, int classes)
{
    if (classes < 2 || classes > 8) throw Error("synthetic scenes support 2..8 classes");
    if (size < 16) throw Error("synthetic scenes need size >= 16");
    std::mt19937_64 rng(seed);
    auto uniform = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
    auto pick = [&](int n) { return static_cast<int>(std::uniform_int_distribution<int>(0, n - 1)(rng)); };
    const double S = double(size);
    const double share = 1.3 / classes;  // target area fraction of one shape

    std::vector<int32_t> label(static_cast<std::size_t>(size * size));
    for (int attempt = 0;; ++attempt) {
        if (attempt == 10000) throw Error("synthetic scene: class balance not reached");
        const int background = pick(classes);
        std::fill(label.begin(), label.end(), background);
        std::vector<int> order;
        for (int k = 0; k < classes; ++k)
            if (k != background) order.push_back(k);
        for (int extra = pick(3); extra > 0; --extra) order.push_back(pick(classes));
        std::shuffle(order.begin(), order.end(), rng);

        for (int k : order) {
            const int kind = pick(3);
            if (kind == 0) {  // rectangle
                const double side = std::sqrt(share) * S, aspect = uniform(0.6, 1.6);
                const double w = std::min(S, side * std::sqrt(aspect) * uniform(0.8, 1.2));
                const double h = std::min(S, side / std::sqrt(aspect) * uniform(0.8, 1.2));
                const double x0 = uniform(0, S - w), y0 = uniform(0, S - h);
                for (int64_t y = int64_t(y0); y < int64_t(y0 + h); ++y)
                    for (int64_t x = int64_t(x0); x < int64_t(x0 + w); ++x) label[y * size + x] = k;
            } else if (kind == 1) {  // disc
                const double r = std::sqrt(share / 3.14159265) * S * uniform(0.8, 1.2);
                const double cx = uniform(r, S - r), cy = uniform(r, S - r);
                for (int64_t y = 0; y < size; ++y)
                    for (int64_t x = 0; x < size; ++x) {
                        const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
                        if (dx * dx + dy * dy <= r * r) label[y * size + x] = k;
                    }
            } else {  // stripe across the scene, horizontal or vertical
                const double w = share * S * uniform(0.7, 1.1), c = uniform(0, S - w);
                const bool vertical = pick(2) == 1;
                for (int64_t y = 0; y < size; ++y)
                    for (int64_t x = 0; x < size; ++x) {
                        const double t = vertical ? x : y;
                        if (t >= c && t < c + w) label[y * size + x] = k;
                    }
            }
        }
        std::vector<int64_t> hist(static_cast<std::size_t>(classes), 0);
        for (int32_t l : label) ++hist[l];
        const double total = double(label.size());
        if (std::all_of(hist.begin(), hist.end(), [&](int64_t n) { return n >= 0.05 * total && n <= 0.60 * total; })) break;
    }

    Sample s;
    s.id = "synth_" + std::to_string(seed);
    s.label = label;
    s.image = Tensor32::zeros({3, size, size});
    auto d = s.image.mutable_data();
    std::normal_distribution<double> noise(0.0, kSynthNoise);
    const int64_t plane = size * size;
    for (int64_t p = 0; p < plane; ++p) {
        const auto color = synth_class_color(label[p]);
        for (int c = 0; c < 3; ++c) d[c * plane + p] = static_cast<float>(std::clamp(color[c] + noise(rng), 0.0, 1.0));
    }
    return s;
}

std::vector<Sample> synth_dataset(uint64_t seed, int count, int64_t size, int classes)
{
    std::vector<Sample> out;
    for (int i = 0; i < count; ++i) out.push_back(synth_scene(seed + static_cast<uint64_t>(i), size, classes));
    return out;
}

// ---- augmentation -----------------------------------------------------------------

Sample dihedral(const Sample& s, int transform)
{
    if (transform < 0 || transform >= 8) throw Error("dihedral transform index must be in [0, 8)");
    const int64_t H = s.height(), W = s.width();
    const int rot = transform % 4;
    const bool mirror = transform >= 4;
    const int64_t OH = rot % 2 ? W : H, OW = rot % 2 ? H : W;
    // Source pixel of output (y, x): undo the mirror, then the rotation.
    auto source = [&](int64_t y, int64_t x) {
        if (mirror) x = OW - 1 - x;
        int64_t h = OH, w = OW;
        for (int r = 0; r < rot; ++r) {
            // one counter-clockwise turn maps (y, x) of a h x w source to (w-1-x, y)
            const int64_t py = x, px = h - 1 - y;
            y = py;
            x = px;
            std::swap(h, w);
        }
        return std::pair<int64_t, int64_t>{y, x};
    };
    Sample out;
    out.id = s.id;
    out.image = Tensor32::zeros({3, OH, OW});
    out.label.resize(s.label.size());
    auto d = out.image.mutable_data();
    const auto src = s.image.data();
    for (int64_t y = 0; y < OH; ++y)
        for (int64_t x = 0; x < OW; ++x) {
            const auto [sy, sx] = source(y, x);
            out.label[y * OW + x] = s.label[sy * W + sx];
            for (int c = 0; c < 3; ++c) d[(c * OH + y) * OW + x] = src[(c * H + sy) * W + sx];
        }
    return out;
}

Sample augment(const Sample& s, uint64_t seed)
{
    std::mt19937_64 rng(seed);
    return dihedral(s, static_cast<int>(std::uniform_int_distribution<int>(0, 7)(rng)));
}

// ---- normalization -------------------------------------------------------------------

NormStats compute_norm_stats(const std::vector<Sample>& samples)
{
    if (samples.empty()) throw Error("normalization statistics need at least one sample");
    std::array<double, 3> sum{}, sq{};
    double n = 0;
    for (const auto& s : samples) {
        const int64_t plane = s.height() * s.width();
        const auto d = s.image.data();
        for (int c = 0; c < 3; ++c)
            for (int64_t p = 0; p < plane; ++p) {
                const double v = d[c * plane + p];
                sum[c] += v;
                sq[c] += v * v;
            }
        n += double(plane);
    }
    NormStats st;
    for (int c = 0; c < 3; ++c) {
        const double mean = sum[c] / n;
        st.mean[c] = static_cast<float>(mean);
        st.std[c] = static_cast<float>(std::max(std::sqrt(std::max(sq[c] / n - mean * mean, 0.0)), 1e-6));
    }
    return st;
}

Tensor32 normalize(const Tensor32& image, const NormStats& st)
{
    const int64_t plane = image.dim(1) * image.dim(2);
    auto out = Tensor32::zeros(image.shape());
    auto d = out.mutable_data();
    const auto s = image.data();
    for (int c = 0; c < 3; ++c)
        for (int64_t p = 0; p < plane; ++p) d[c * plane + p] = (s[c * plane + p] - st.mean[c]) / st.std[c];
    return out;
}

Tensor32 stack_images(const std::vector<const Sample*>& batch, const NormStats& st)
{
    if (batch.empty()) throw Error("empty batch");
    const int64_t H = batch[0]->height(), W = batch[0]->width(), per = 3 * H * W;
    auto out = Tensor32::zeros({static_cast<int64_t>(batch.size()), 3, H, W});
    auto d = out.mutable_data();
    for (std::size_t b = 0; b < batch.size(); ++b) {
        if (batch[b]->height() != H || batch[b]->width() != W) throw Error("batch samples differ in size");
        const auto n = normalize(batch[b]->image, st);
        std::copy(n.data().begin(), n.data().end(), d.begin() + static_cast<std::ptrdiff_t>(b * per));
    }
    return out;
}

std::vector<int32_t> stack_labels(const std::vector<const Sample*>& batch)
{
    std::vector<int32_t> out;
    for (const auto* s : batch) out.insert(out.end(), s->label.begin(), s->label.end());
    return out;
}

}  // namespace dcswin

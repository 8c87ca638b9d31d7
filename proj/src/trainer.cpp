#include "dcswin/trainer.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include <zlib.h>

#include "dcswin/detail/autograd.hpp"

namespace dcswin {

using detail::finish;
using detail::make_output;
using detail::parent_grad;

// ---- loss ---------------------------------------------------------------------

template <typename T>
Tensor<T> soft_cross_entropy(const Tensor<T>& logits, std::span<const int32_t> labels, double smoothing,
                             int32_t ignore_label)
{
    if (logits.ndim() != 4) throw ShapeError("soft_cross_entropy expects logits [B, K, H, W], got " + to_string(logits.shape()));
    if (!(smoothing >= 0 && smoothing < 1)) throw Error("label smoothing must lie in [0, 1)");
    const int64_t B = logits.dim(0), K = logits.dim(1), P = logits.dim(2) * logits.dim(3);
    if (static_cast<int64_t>(labels.size()) != B * P) {
        throw ShapeError("soft_cross_entropy: " + std::to_string(labels.size()) + " labels for logits " +
                         to_string(logits.shape()));
    }
    int64_t valid = 0;
    for (int32_t l : labels) {
        if (l == ignore_label) continue;
        if (l < 0 || l >= K) throw Error("label " + std::to_string(l) + " outside [0, " + std::to_string(K) + ")");
        ++valid;
    }
    if (valid == 0) throw Error("soft_cross_entropy: every pixel is ignored");

    Tensor<T> out = make_output<T>("soft_cross_entropy", {}, {&logits});
    if (out.is_meta()) return out;
    const T* x = logits.data().data();
    const double on = 1.0 - smoothing + smoothing / double(K), off = smoothing / double(K);
    // softmax - q, already divided by the pixel count: exactly the gradient
    auto dlogits = std::make_shared<std::vector<T>>(static_cast<std::size_t>(logits.numel()), T(0));
    std::vector<double> z(static_cast<std::size_t>(K));
    double total = 0;
    for (int64_t b = 0; b < B; ++b) {
        const T* xb = x + b * K * P;
        T* gb = dlogits->data() + b * K * P;
        for (int64_t p = 0; p < P; ++p) {
            const int32_t y = labels[b * P + p];
            if (y == ignore_label) continue;
            double mx = -std::numeric_limits<double>::infinity();
            for (int64_t k = 0; k < K; ++k) {
                z[k] = double(xb[k * P + p]);
                mx = std::max(mx, z[k]);
            }
            double se = 0;
            for (int64_t k = 0; k < K; ++k) se += std::exp(z[k] - mx);
            const double lse = mx + std::log(se);
            for (int64_t k = 0; k < K; ++k) {
                const double q = k == y ? on : off;
                total -= q * (z[k] - lse);
                gb[k * P + p] = static_cast<T>((std::exp(z[k] - lse) - q) / double(valid));
            }
        }
    }
    out.mutable_data()[0] = static_cast<T>(total / double(valid));
    finish<T>(out, [dlogits](TensorNode<T>& node) {
        if (auto* g = parent_grad(node, 0)) {
            const T go = node.grad[0];
            for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += go * (*dlogits)[i];
        }
    });
    return out;
}

// ---- optimizer -------------------------------------------------------------------

template <typename T>
AdamW<T>::AdamW(std::vector<NamedTensor<T>> params, AdamWOptions opt) : params_(std::move(params)), opt_(opt)
{
    if (!(opt_.lr > 0)) throw Error("AdamW: lr must be positive");
    for (const auto& p : params_) {
        m_.emplace_back(static_cast<std::size_t>(p.tensor.numel()), 0.0);
        v_.emplace_back(static_cast<std::size_t>(p.tensor.numel()), 0.0);
    }
}

template <typename T>
void AdamW<T>::step()
{
    for (const auto& p : params_) {
        if (!p.tensor.has_grad()) continue;
        const auto g = p.tensor.grad();
        for (std::size_t i = 0; i < g.size(); ++i) {
            if (!std::isfinite(g[i])) {
                throw NumericError("non-finite gradient in parameter " + p.name + " at element " + std::to_string(i));
            }
        }
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(opt_.beta1, double(t_)), bc2 = 1.0 - std::pow(opt_.beta2, double(t_));
    const double decay = 1.0 - opt_.lr * opt_.weight_decay;
    for (std::size_t j = 0; j < params_.size(); ++j) {
        auto& p = params_[j].tensor;
        auto w = p.mutable_data();
        const bool has = p.has_grad();
        const auto g = has ? p.grad() : std::span<const T>{};
        auto& m = m_[j];
        auto& v = v_[j];
        for (std::size_t i = 0; i < w.size(); ++i) {
            const double gi = has ? double(g[i]) : 0.0;
            m[i] = opt_.beta1 * m[i] + (1 - opt_.beta1) * gi;
            v[i] = opt_.beta2 * v[i] + (1 - opt_.beta2) * gi * gi;
            const double theta = double(w[i]) * decay;
            w[i] = static_cast<T>(theta - opt_.lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + opt_.eps));
        }
    }
}

// ---- checkpoint --------------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'D', 'C', 'S', 'W', 'C', 'K', 'P', 'T'};

class Writer {
public:
    void bytes(const void* p, std::size_t n) { buf_.append(static_cast<const char*>(p), n); }
    void u32(uint32_t v)
    {
        for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    }
    void u64(uint64_t v)
    {
        for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    }
    void f32(float f) { u32(std::bit_cast<uint32_t>(f)); }
    void str(const std::string& s)
    {
        u64(s.size());
        bytes(s.data(), s.size());
    }
    const std::string& buffer() const { return buf_; }

private:
    std::string buf_;
};

class Reader {
public:
    Reader(const std::string& buf, std::size_t end, std::string path) : buf_(buf), end_(end), path_(std::move(path)) {}
    const char* take(std::size_t n)
    {
        if (n > end_ - pos_) throw Error(path_ + ": checkpoint is truncated");
        const char* p = buf_.data() + pos_;
        pos_ += n;
        return p;
    }
    uint64_t uint(int width)
    {
        const auto* p = reinterpret_cast<const unsigned char*>(take(std::size_t(width)));
        uint64_t v = 0;
        for (int i = 0; i < width; ++i) v |= uint64_t(p[i]) << (8 * i);
        return v;
    }
    uint32_t u32() { return static_cast<uint32_t>(uint(4)); }
    uint64_t u64() { return uint(8); }
    float f32() { return std::bit_cast<float>(u32()); }
    std::string str()
    {
        const uint64_t n = u64();
        const char* p = take(n);
        return std::string(p, n);
    }
    bool done() const { return pos_ == end_; }

private:
    const std::string& buf_;
    std::size_t end_, pos_ = 0;
    std::string path_;
};

uint32_t crc32_of(const char* data, std::size_t n)
{
    uLong crc = crc32(0L, Z_NULL, 0);
    crc = crc32(crc, reinterpret_cast<const Bytef*>(data), static_cast<uInt>(n));
    return static_cast<uint32_t>(crc);
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt)
{
    Writer w;
    w.bytes(kMagic, sizeof kMagic);
    w.u32(kCheckpointVersion);
    w.str(ckpt.config);
    for (float v : ckpt.norm.mean) w.f32(v);
    for (float v : ckpt.norm.std) w.f32(v);
    w.u64(ckpt.tensors.size());
    for (const auto& [name, t] : ckpt.tensors) {
        w.str(name);
        w.u32(static_cast<uint32_t>(t.ndim()));
        for (int64_t d : t.shape()) w.u64(static_cast<uint64_t>(d));
        for (float v : t.data()) w.f32(v);
    }
    const uint32_t crc = crc32_of(w.buffer().data(), w.buffer().size());
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write " + path.string());
    out.write(w.buffer().data(), static_cast<std::streamsize>(w.buffer().size()));
    Writer tail;
    tail.u32(crc);
    out.write(tail.buffer().data(), 4);
    if (!out) throw Error("write failed: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open checkpoint " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    const std::string buf = ss.str();
    const std::string p = path.string();
    if (buf.size() < sizeof kMagic + 8 || std::memcmp(buf.data(), kMagic, sizeof kMagic) != 0) {
        throw Error(p + ": not a checkpoint (bad magic)");
    }
    Reader crc_reader(buf, buf.size(), p);
    crc_reader.take(buf.size() - 4);
    if (crc_reader.u32() != crc32_of(buf.data(), buf.size() - 4)) throw Error(p + ": CRC mismatch, file is corrupt");

    Reader r(buf, buf.size() - 4, p);
    r.take(sizeof kMagic);
    if (const uint32_t version = r.u32(); version != kCheckpointVersion) {
        throw Error(p + ": unsupported checkpoint version " + std::to_string(version));
    }
    Checkpoint ck;
    ck.config = r.str();
    for (auto& v : ck.norm.mean) v = r.f32();
    for (auto& v : ck.norm.std) v = r.f32();
    const uint64_t count = r.u64();
    for (uint64_t i = 0; i < count; ++i) {
        NamedTensor<float> nt;
        nt.name = r.str();
        const uint32_t rank = r.u32();
        if (rank > 8) throw Error(p + ": implausible tensor rank in record " + nt.name);
        Shape shape(rank);
        for (auto& d : shape) d = static_cast<int64_t>(r.u64());
        std::vector<float> values(static_cast<std::size_t>(numel(shape)));
        for (auto& v : values) v = r.f32();
        nt.tensor = Tensor<float>::from(shape, std::move(values));
        ck.tensors.push_back(std::move(nt));
    }
    if (!r.done()) throw Error(p + ": trailing bytes after the last record");
    return ck;
}

std::vector<NamedTensor<float>> model_state(const Module<float>& model)
{
    auto out = model.named_parameters();
    for (auto& b : model.named_buffers()) out.push_back(b);
    return out;
}

void load_model_state(Module<float>& model, const std::vector<NamedTensor<float>>& tensors)
{
    auto state = model_state(model);
    std::set<std::string> have, given;
    std::map<std::string, const Tensor<float>*> by_name;
    for (const auto& nt : state) have.insert(nt.name);
    for (const auto& nt : tensors) {
        given.insert(nt.name);
        by_name[nt.name] = &nt.tensor;
    }
    if (have != given) {
        std::string msg = "checkpoint does not match the model.";
        std::string missing, extra;
        for (const auto& n : have)
            if (!given.count(n)) missing += " " + n;
        for (const auto& n : given)
            if (!have.count(n)) extra += " " + n;
        if (!missing.empty()) msg += " Missing from checkpoint:" + missing + ".";
        if (!extra.empty()) msg += " Not in model:" + extra + ".";
        throw Error(msg);
    }
    for (auto& nt : state) {
        const auto& src = *by_name.at(nt.name);
        if (src.shape() != nt.tensor.shape()) {
            throw Error("checkpoint tensor " + nt.name + " has shape " + to_string(src.shape()) + ", model expects " +
                        to_string(nt.tensor.shape()));
        }
        std::copy(src.data().begin(), src.data().end(), nt.tensor.mutable_data().begin());
    }
}

LoadedModel restore_model(const std::filesystem::path& path)
{
    auto ck = load_checkpoint(path);
    LoadedModel out;
    out.config = RunConfig::parse(ck.config);
    out.norm = ck.norm;
    out.model = std::make_shared<SegmentationModel<float>>(out.config.model, out.config.train.seed);
    load_model_state(*out.model, ck.tensors);
    out.model->set_training(false);
    return out;
}

// ---- training -------------------------------------------------------------------------

std::string format_log(const std::vector<LogRow>& rows)
{
    std::string out = "step\tloss\toa\tmiou\tmean_f1\n";
    auto cell = [](double v) {
        if (std::isnan(v)) return std::string("nan");
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.6f", v);
        return std::string(buf);
    };
    for (const auto& r : rows) {
        out += std::to_string(r.step) + "\t" + cell(r.loss) + "\t" + cell(r.oa) + "\t" + cell(r.miou) + "\t" +
               cell(r.mean_f1) + "\n";
    }
    return out;
}

ConfusionMatrix evaluate(const SegmentationModel<float>& model, const std::vector<Sample>& samples, const NormStats& norm,
                         int32_t ignore_label, int batch)
{
    ConfusionMatrix cm(model.config.num_classes, ignore_label);
    auto& m = const_cast<SegmentationModel<float>&>(model);
    const bool was_training = m.training();
    m.set_training(false);
    NoGradGuard no_grad;
    try {
        for (std::size_t i = 0; i < samples.size();) {
            std::vector<const Sample*> group{&samples[i++]};
            while (i < samples.size() && int(group.size()) < batch && samples[i].height() == group[0]->height() &&
                   samples[i].width() == group[0]->width()) {
                group.push_back(&samples[i++]);
            }
            const auto logits = model.forward(stack_images(group, norm));
            const int64_t K = logits.dim(1), H = logits.dim(2), W = logits.dim(3);
            for (std::size_t b = 0; b < group.size(); ++b) {
                const auto one = Tensor32::from({K, H, W}, std::vector<float>(logits.data().begin() + b * K * H * W,
                                                                              logits.data().begin() + (b + 1) * K * H * W));
                cm.accumulate(group[b]->label, argmax_labels(one));
            }
        }
    } catch (...) {
        m.set_training(was_training);
        throw;
    }
    m.set_training(was_training);
    return cm;
}

TrainResult train(SegmentationModel<float>& model, const std::vector<Sample>& samples, const TrainConfig& cfg,
                  int32_t ignore_label, const std::function<void(const LogRow&)>& on_row)
{
    cfg.validate();
    if (samples.empty()) throw Error("training set is empty");
    for (const auto& s : samples) {
        validate_sample(s, model.config.num_classes, ignore_label);
        if (s.height() != samples[0].height() || s.width() != samples[0].width()) {
            throw Error("training tiles must share one size; sample " + s.id + " differs");
        }
    }
    TrainResult result;
    result.norm = compute_norm_stats(samples);
    AdamW<float> opt(model.named_parameters(),
                     {cfg.lr, cfg.weight_decay, cfg.beta1, cfg.beta2, cfg.eps});
    std::mt19937_64 rng(cfg.seed);
    std::vector<std::size_t> order(samples.size());
    std::iota(order.begin(), order.end(), std::size_t(0));
    std::size_t cursor = order.size();

    model.set_training(true);
    model.zero_grad();
    for (int64_t step = 1; step <= cfg.steps; ++step) {
        std::vector<Sample> augmented;
        std::vector<const Sample*> batch;
        for (int b = 0; b < cfg.batch; ++b) {
            if (cursor == order.size()) {
                std::shuffle(order.begin(), order.end(), rng);
                cursor = 0;
            }
            batch.push_back(&samples[order[cursor++]]);
        }
        if (cfg.augment) {
            augmented.reserve(batch.size());
            for (auto*& s : batch) {
                augmented.push_back(dihedral(*s, static_cast<int>(rng() % 8)));
                s = &augmented.back();
            }
        }
        LogRow row;
        row.step = step;
        try {
            const auto logits = model.forward(stack_images(batch, result.norm));
            const auto loss = soft_cross_entropy(logits, stack_labels(batch), cfg.label_smoothing, ignore_label);
            row.loss = double(loss.item());
            if (!std::isfinite(row.loss)) throw NumericError("loss is not finite");
            loss.backward();
            opt.step();
        } catch (const NumericError& e) {
            throw DivergenceError("training diverged at step " + std::to_string(step) + ": " + e.what());
        }
        model.zero_grad();
        if ((cfg.eval_every > 0 && step % cfg.eval_every == 0) || step == cfg.steps) {
            try {
                result.final_confusion = evaluate(model, samples, result.norm, ignore_label, cfg.batch);
            } catch (const NumericError& e) {
                throw DivergenceError("evaluation after step " + std::to_string(step) + " failed: " + e.what());
            }
            row.oa = overall_accuracy(result.final_confusion);
            row.miou = mean_iou(result.final_confusion);
            row.mean_f1 = f1_scores(result.final_confusion).mean_f1;
        }
        result.log.push_back(row);
        if (on_row) on_row(row);
    }
    model.set_training(false);
    return result;
}

std::vector<Sample> load_images(const RunConfig& cfg)
{
    const int K = cfg.model.num_classes;
    std::vector<Sample> images = cfg.data.root.empty()
                                     ? synth_dataset(cfg.data.synth_seed, cfg.data.synth_count, cfg.data.synth_size, K)
                                     : load_dataset(cfg.data.root);
    for (const auto& s : images) validate_sample(s, K, cfg.data.ignore_label);
    return images;
}

std::vector<Sample> load_training_tiles(const RunConfig& cfg)
{
    std::vector<Sample> tiles;
    for (const auto& s : load_images(cfg))
        for (auto& t : tile_sample(s, cfg.data.tile_spec(), nullptr, cfg.data.ignore_label)) tiles.push_back(std::move(t));
    return tiles;
}

// ---- inference --------------------------------------------------------------------------

Tensor32 predict_logits(const SegmentationModel<float>& model, const Tensor32& image, const NormStats& norm,
                        const TileSpec& spec, int batch)
{
    spec.validate();
    if (image.ndim() != 3 || image.dim(0) != 3) throw ShapeError("predict: image must be [3, H, W]");
    if (batch < 1) throw Error("predict: batch must be positive");
    const int K = model.config.num_classes;
    const int64_t H = image.dim(1), W = image.dim(2), t = spec.tile;
    const auto origins = tile_origins(H, W, spec);
    Stitcher st(K, H, W);

    auto& m = const_cast<SegmentationModel<float>&>(model);
    const bool was_training = m.training();
    m.set_training(false);
    NoGradGuard no_grad;
    try {
        for (std::size_t i = 0; i < origins.size(); i += std::size_t(batch)) {
            const std::size_t n = std::min(origins.size() - i, std::size_t(batch));
            std::vector<float> buf;
            buf.reserve(n * 3 * t * t);
            for (std::size_t b = 0; b < n; ++b) {
                const auto crop = normalize(crop_image(image, origins[i + b], t), norm);
                buf.insert(buf.end(), crop.data().begin(), crop.data().end());
            }
            const auto logits = model.forward(Tensor32::from({int64_t(n), 3, t, t}, std::move(buf)));
            const auto d = logits.data();
            const int64_t per = K * t * t;
            for (std::size_t b = 0; b < n; ++b) {
                st.add(origins[i + b],
                       Tensor32::from({K, t, t}, std::vector<float>(d.begin() + b * per, d.begin() + (b + 1) * per)));
            }
        }
    } catch (...) {
        m.set_training(was_training);
        throw;
    }
    m.set_training(was_training);
    return st.logits();
}

ConfusionMatrix evaluate_images(const SegmentationModel<float>& model, const std::vector<Sample>& images,
                                const NormStats& norm, const TileSpec& spec, int32_t ignore_label)
{
    ConfusionMatrix cm(model.config.num_classes, ignore_label);
    for (const auto& s : images) {
        validate_sample(s, model.config.num_classes, ignore_label);
        cm.accumulate(s.label, argmax_labels(predict_logits(model, s.image, norm, spec)));
    }
    return cm;
}

// ---- ablation ---------------------------------------------------------------------------

namespace {

std::string backbone_label(const std::string& preset)
{
    static const std::map<std::string, std::string> names{
        {"swin_nano", "Swin-nano"}, {"swin_t", "Swin-T"}, {"swin_s", "Swin-S"}, {"swin_b", "Swin-B"}, {"swin_l", "Swin-L"}};
    const auto it = names.find(preset);
    return it == names.end() ? preset : it->second;
}

}  // namespace

std::vector<AblationRow> run_ablation(const RunConfig& cfg, const std::function<void(const std::string&)>& progress)
{
    const auto tiles = load_training_tiles(cfg);
    const std::vector<std::pair<std::string, std::string>> variants{
        {"baseline", ""}, {"dc", "+DC"}, {"dcfam_ns", "+DCFAM-NS"}, {"dcfam", "+DCFAM"}};
    std::vector<AblationRow> rows;
    for (const auto& [variant, suffix] : variants) {
        RunConfig c = cfg;
        c.model.variant = variant;
        SegmentationModel<float> model(c.model, c.train.seed);
        TrainConfig tc = c.train;
        tc.eval_every = 0;
        const auto result = train(model, tiles, tc, c.data.ignore_label);
        AblationRow row;
        row.method = backbone_label(c.model.preset) + suffix;
        if (tc.steps > 0) {
            row.final_loss = result.log.back().loss;
            row.oa = overall_accuracy(result.final_confusion);
            row.miou = mean_iou(result.final_confusion);
            row.mean_f1 = f1_scores(result.final_confusion).mean_f1;
        } else {
            const auto cm = evaluate(model, tiles, result.norm, c.data.ignore_label, tc.batch);
            row.final_loss = std::numeric_limits<double>::quiet_NaN();
            row.oa = overall_accuracy(cm);
            row.miou = mean_iou(cm);
            row.mean_f1 = f1_scores(cm).mean_f1;
        }
        if (progress) progress(row.method);
        rows.push_back(row);
    }
    return rows;
}

std::string format_ablation(const std::vector<AblationRow>& rows)
{
    std::size_t width = 6;
    for (const auto& r : rows) width = std::max(width, r.method.size());
    char line[160];
    std::snprintf(line, sizeof line, "%-*s  %8s  %8s  %8s\n", int(width), "Method", "Mean F1", "OA", "mIoU");
    std::string out = line;
    for (const auto& r : rows) {
        std::snprintf(line, sizeof line, "%-*s  %8.2f  %8.2f  %8.2f\n", int(width), r.method.c_str(), r.mean_f1 * 100,
                      r.oa * 100, r.miou * 100);
        out += line;
    }
    return out;
}

#define DCSWIN_INSTANTIATE(T)                                                                                      \
    template Tensor<T> soft_cross_entropy(const Tensor<T>&, std::span<const int32_t>, double, int32_t);           \
    template class AdamW<T>;

DCSWIN_INSTANTIATE(float)
DCSWIN_INSTANTIATE(double)
#undef DCSWIN_INSTANTIATE

}  // namespace dcswin

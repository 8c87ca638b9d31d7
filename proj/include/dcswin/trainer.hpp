#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "dcswin/config.hpp"
#include "dcswin/data.hpp"
#include "dcswin/dcfam.hpp"
#include "dcswin/metrics.hpp"
#include "dcswin/nn.hpp"

namespace dcswin {

// ---- loss ---------------------------------------------------------------------

/// Mean over non-ignored pixels of -sum_k q_k log softmax(logits)_k with
/// q = (1 - eps) onehot(label) + eps / K. logits [B, K, H, W], labels B*H*W.
/// Throws Error when every pixel is ignored or a label is out of range.
template <typename T>
Tensor<T> soft_cross_entropy(const Tensor<T>& logits, std::span<const int32_t> labels, double smoothing,
                             int32_t ignore_label = kDefaultIgnoreLabel);

// ---- optimizer -------------------------------------------------------------------

struct AdamWOptions {
    double lr = 3e-4;
    double weight_decay = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Decoupled weight decay: theta -= lr * wd * theta, then the bias-corrected
/// Adam step. Moments are kept in double.
template <typename T>
class AdamW {
public:
    AdamW(std::vector<NamedTensor<T>> params, AdamWOptions opt);

    /// Applies one update from the accumulated grads (missing grads count as
    /// zero). Throws NumericError naming the parameter when a grad is not
    /// finite; no parameter is modified in that case.
    void step();
    int64_t steps_taken() const { return t_; }
    const AdamWOptions& options() const { return opt_; }

private:
    std::vector<NamedTensor<T>> params_;
    std::vector<std::vector<double>> m_, v_;
    AdamWOptions opt_;
    int64_t t_ = 0;
};

// ---- checkpoint --------------------------------------------------------------------

inline constexpr uint32_t kCheckpointVersion = 1;

struct Checkpoint {
    std::string config;  // RunConfig::to_ini() text
    NormStats norm;
    std::vector<NamedTensor<float>> tensors;  // parameters then buffers
};

/// "DCSWCKPT", u32 version, config text, normalization stats, then per record
/// name, rank, dims and little-endian float32 data; a CRC32 of everything
/// before it closes the file.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
/// Throws Error on bad magic, version, truncation or CRC mismatch.
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Parameters and buffers of a model, sharing storage with it.
std::vector<NamedTensor<float>> model_state(const Module<float>& model);
/// Copies tensors into the model by name. Throws Error listing the symmetric
/// difference of name sets, or the first shape mismatch.
void load_model_state(Module<float>& model, const std::vector<NamedTensor<float>>& tensors);

/// Rebuilds config, model and stats from a checkpoint file.
struct LoadedModel {
    RunConfig config;
    NormStats norm;
    std::shared_ptr<SegmentationModel<float>> model;
};
LoadedModel restore_model(const std::filesystem::path& path);

// ---- training -------------------------------------------------------------------------

struct LogRow {
    int64_t step = 0;
    double loss = std::numeric_limits<double>::quiet_NaN();
    double oa = std::numeric_limits<double>::quiet_NaN();
    double miou = std::numeric_limits<double>::quiet_NaN();
    double mean_f1 = std::numeric_limits<double>::quiet_NaN();
};

/// "step\tloss\toa\tmiou\tmean_f1" header then one row per step; values not
/// measured at a step print as "nan".
std::string format_log(const std::vector<LogRow>& rows);

struct TrainResult {
    std::vector<LogRow> log;
    NormStats norm;
    ConfusionMatrix final_confusion{2};
};

/// Per-sample forward in eval mode, summed into one confusion matrix.
ConfusionMatrix evaluate(const SegmentationModel<float>& model, const std::vector<Sample>& samples, const NormStats& norm,
                         int32_t ignore_label = kDefaultIgnoreLabel, int batch = 4);

/// Trains on `samples` (already tiled, one size) with AdamW and soft
/// cross-entropy. Batches are drawn from a seeded shuffle; steps with
/// step % eval_every == 0 and the last step also evaluate on the training set.
/// `on_row` sees each log row as soon as it is complete. Throws
/// DivergenceError when loss, a gradient or an activation is not finite.
TrainResult train(SegmentationModel<float>& model, const std::vector<Sample>& samples, const TrainConfig& cfg,
                  int32_t ignore_label = kDefaultIgnoreLabel, const std::function<void(const LogRow&)>& on_row = {});

/// Training tiles for a run: the dataset at data.root or synthetic scenes,
/// cut per the tile spec. Throws Error when labels exceed the class count.
std::vector<Sample> load_training_tiles(const RunConfig& cfg);

/// Whole images of a run, before tiling, validated against the class count.
std::vector<Sample> load_images(const RunConfig& cfg);

// ---- inference --------------------------------------------------------------------------

/// Tiles `image` [3, H, W] per the spec, runs the model in eval mode and
/// averages overlapping logits. Returns [K, H, W].
Tensor32 predict_logits(const SegmentationModel<float>& model, const Tensor32& image, const NormStats& norm,
                        const TileSpec& spec, int batch = 4);

/// Confusion matrix of stitched predictions over whole images.
ConfusionMatrix evaluate_images(const SegmentationModel<float>& model, const std::vector<Sample>& images,
                                const NormStats& norm, const TileSpec& spec, int32_t ignore_label = kDefaultIgnoreLabel);

// ---- ablation ---------------------------------------------------------------------------

struct AblationRow {
    std::string method;
    double mean_f1 = 0, oa = 0, miou = 0;
    double final_loss = 0;
};

/// Trains baseline, +DC, +DCFAM-NS and +DCFAM with the same seed, data and
/// step budget; metrics are measured on the training tiles.
std::vector<AblationRow> run_ablation(const RunConfig& cfg, const std::function<void(const std::string&)>& progress = {});
/// Method, Mean F1, OA, mIoU (percent) aligned table.
std::string format_ablation(const std::vector<AblationRow>& rows);

}  // namespace dcswin

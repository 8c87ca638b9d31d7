#pragma once

#include <cstdint>
#include <string>

#include "dcswin/data.hpp"
#include "dcswin/swin.hpp"

namespace dcswin {

struct TrainConfig {
    double lr = 3e-4;
    double weight_decay = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double label_smoothing = 0.1;
    int64_t steps = 200;
    int batch = 4;
    uint64_t seed = 0;
    int64_t eval_every = 50;
    bool augment = false;

    void validate() const;
};

struct DataConfig {
    std::string root;  // empty: generate synthetic scenes
    int64_t tile = 1024;
    int64_t stride = 0;  // 0: same as tile
    int synth_count = 8;
    int64_t synth_size = 64;
    uint64_t synth_seed = 0;
    int32_t ignore_label = kDefaultIgnoreLabel;

    TileSpec tile_spec() const { return {tile, stride > 0 ? stride : tile}; }
    void validate() const;
};

/// Everything a command needs. Serialized as flat `section.key = value` lines
/// (sections: model, train, data, output); `#` starts a comment.
struct RunConfig {
    ModelConfig model;
    TrainConfig train;
    DataConfig data;
    std::string out_dir = "out";

    /// Throws ConfigError naming the offending key or line. Keys absent from
    /// the text keep their defaults; `model.preset` resets all model fields
    /// before the remaining model keys apply.
    static RunConfig parse(const std::string& text);
    static RunConfig load(const std::string& path);
    /// Every key with its current value, in a stable order.
    std::string to_ini() const;
    void validate() const;
};

}  // namespace dcswin

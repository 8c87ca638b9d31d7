// dcswin: train, evaluate, predict, benchmark and self-check from the shell.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "dcswin/bench.hpp"
#include "dcswin/config.hpp"
#include "dcswin/data.hpp"
#include "dcswin/error.hpp"
#include "dcswin/trainer.hpp"
#include "dcswin/verify.hpp"

namespace fs = std::filesystem;
using namespace dcswin;

namespace {

constexpr int kExitError = 1;
constexpr int kExitConfig = 2;
constexpr int kExitDiverged = 3;

void write_text(const fs::path& path, const std::string& text)
{
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream f(path, std::ios::binary);
    if (!f) throw Error("cannot write " + path.string());
    f << text;
    if (!f) throw Error("write failed: " + path.string());
}

RunConfig load_config(const std::string& path, const std::optional<uint64_t>& seed, const std::string& out)
{
    auto cfg = RunConfig::load(path);
    if (seed) cfg.train.seed = *seed;
    if (!out.empty()) cfg.out_dir = out;
    cfg.validate();
    return cfg;
}

int cmd_train(const std::string& config, const std::optional<uint64_t>& seed, const std::string& out)
{
    const auto cfg = load_config(config, seed, out);
    const auto tiles = load_training_tiles(cfg);
    SegmentationModel<float> model(cfg.model, cfg.train.seed);
    std::fprintf(stderr, "training %s/%s on %zu tiles for %lld steps\n", cfg.model.preset.c_str(),
                 cfg.model.variant.c_str(), tiles.size(), static_cast<long long>(cfg.train.steps));

    const auto result = train(model, tiles, cfg.train, cfg.data.ignore_label, [](const LogRow& r) {
        if (std::isnan(r.oa)) return;
        std::fprintf(stderr, "step %lld  loss %.4f  oa %.4f  miou %.4f\n", static_cast<long long>(r.step), r.loss, r.oa,
                     r.miou);
    });

    const fs::path dir(cfg.out_dir);
    fs::create_directories(dir);
    save_checkpoint(dir / "model.ckpt", Checkpoint{cfg.to_ini(), result.norm, model_state(model)});
    write_text(dir / "train.tsv", format_log(result.log));
    std::printf("%s", format_report_table(result.final_confusion).c_str());
    std::printf("wrote %s and %s\n", (dir / "model.ckpt").c_str(), (dir / "train.tsv").c_str());
    return 0;
}

int cmd_eval(const std::string& config, const std::string& ckpt, const std::string& out)
{
    auto cfg = RunConfig::load(config);
    cfg.validate();
    const auto loaded = restore_model(ckpt);
    if (loaded.config.model.num_classes != cfg.model.num_classes) {
        throw ConfigError("model.num_classes is " + std::to_string(cfg.model.num_classes) + " but the checkpoint has " +
                          std::to_string(loaded.config.model.num_classes) + " classes");
    }
    const auto images = load_images(cfg);
    const auto cm = evaluate_images(*loaded.model, images, loaded.norm, cfg.data.tile_spec(), cfg.data.ignore_label);
    const auto table = format_report_table(cm);
    std::printf("%s", table.c_str());
    for (const auto& w : f1_scores(cm).warnings) std::fprintf(stderr, "warning: %s\n", w.c_str());
    if (!out.empty()) {
        const fs::path dir(out);
        write_text(dir / "report.txt", table);
        write_text(dir / "report.tsv", format_report_tsv(cm));
    }
    return 0;
}

int cmd_predict(const std::string& ckpt, const std::string& image_path, const std::string& out)
{
    const auto loaded = restore_model(ckpt);
    const auto image = read_ppm(image_path);
    const auto logits = predict_logits(*loaded.model, image, loaded.norm, loaded.config.data.tile_spec());
    const auto labels = argmax_labels(logits);
    const int64_t H = image.dim(1), W = image.dim(2);

    fs::path color(out);
    fs::path raw = color;
    if (color.extension() == ".ppm") {
        raw.replace_extension(".pgm");
    } else {
        raw += ".pgm";
        color += ".ppm";
    }
    if (color.has_parent_path()) fs::create_directories(color.parent_path());
    write_ppm_rgb(color, H, W, colorize(labels));
    write_pgm(raw, H, W, labels);
    std::printf("wrote %s and %s (%lldx%lld)\n", color.c_str(), raw.c_str(), static_cast<long long>(W),
                static_cast<long long>(H));
    return 0;
}

std::vector<int64_t> parse_sizes(const std::string& text)
{
    std::vector<int64_t> sizes;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            std::size_t used = 0;
            const long long n = std::stoll(item, &used);
            if (used != item.size() || n < 1) throw std::invalid_argument(item);
            sizes.push_back(n);
        } catch (const std::exception&) {
            throw ConfigError("--sizes: bad token count '" + item + "'");
        }
    }
    if (sizes.empty()) throw ConfigError("--sizes is empty");
    return sizes;
}

int cmd_bench(const std::string& sizes, const std::string& out, bool force)
{
    const auto r = bench_attention(parse_sizes(sizes), force);
    const auto table = format_bench(r);
    std::printf("%s", table.c_str());
    std::printf("# linear path memory %s\n", r.linear_memory_ok ? "ok (no N^2 allocation)" : "FAILED (N^2 allocation)");
    if (!out.empty()) write_text(out, table);
    return 0;
}

int cmd_verify(const std::optional<uint64_t>& fault_seed)
{
    const auto results = run_verify(fault_seed, [](const CheckResult& r) {
        std::printf("%s %-22s %6.1fs  %s\n", r.pass ? "PASS" : "FAIL", r.name.c_str(), r.seconds, r.detail.c_str());
        std::fflush(stdout);
    });
    const auto failed = std::count_if(results.begin(), results.end(), [](const CheckResult& r) { return !r.pass; });
    std::printf("%zu groups, %ld failed\n", results.size(), static_cast<long>(failed));
    return static_cast<int>(std::min<long>(failed, 255));
}

int cmd_ablation(const std::string& config, const std::optional<uint64_t>& seed, const std::string& out)
{
    const auto cfg = load_config(config, seed, out);
    const auto rows = run_ablation(cfg, [](const std::string& msg) { std::fprintf(stderr, "%s\n", msg.c_str()); });
    const auto table = format_ablation(rows);
    std::printf("%s", table.c_str());
    write_text(fs::path(cfg.out_dir) / "ablation.txt", table);
    return 0;
}

}  // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Swin encoder + dense-aggregation decoder for aerial image segmentation. Worker threads: DCSWIN_THREADS (default 1)."};
    app.require_subcommand(1);

    auto* defaults = app.add_subcommand("defaults", "Print every config key with its default value");

    std::string config, ckpt, out, image, sizes = "1024,4096,16384,65536";
    std::optional<uint64_t> seed, fault_seed;
    bool force = false;

    auto* train_cmd = app.add_subcommand("train", "Train a model; writes model.ckpt and train.tsv");
    train_cmd->add_option("--config", config, "INI config file")->required();
    train_cmd->add_option("--seed", seed, "Override train.seed");
    train_cmd->add_option("--out", out, "Output directory (overrides output.dir)");

    auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on the config's data with tiled inference");
    eval_cmd->add_option("--config", config, "INI config file naming the data and tiling")->required();
    eval_cmd->add_option("--ckpt", ckpt, "Checkpoint file")->required();
    eval_cmd->add_option("--out", out, "Directory for report.txt and report.tsv");

    auto* predict_cmd = app.add_subcommand("predict", "Label one image; writes a colour PPM and a raw PGM label map");
    predict_cmd->add_option("--ckpt", ckpt, "Checkpoint file")->required();
    predict_cmd->add_option("--image", image, "Binary PPM (P6) input")->required();
    predict_cmd->add_option("--out", out, "Output path; .ppm gets the colours, .pgm the labels")->required();

    auto* bench_cmd = app.add_subcommand("bench-attention", "Time factorized vs quadratic spatial attention");
    bench_cmd->add_option("--sizes", sizes, "Comma-separated token counts")->capture_default_str();
    bench_cmd->add_option("--out", out, "TSV output file");
    bench_cmd->add_flag("--force", force, "Run the quadratic oracle above 4096 tokens");

    auto* verify_cmd = app.add_subcommand("verify", "Run the property suite; exit code is the number of failed groups");
    verify_cmd->add_option("--inject-fault", fault_seed, "Corrupt the group chosen by SEED so it must fail");

    auto* ablation_cmd = app.add_subcommand("ablation", "Train baseline, +DC, +DCFAM-NS and +DCFAM; print the table");
    ablation_cmd->add_option("--config", config, "INI config file")->required();
    ablation_cmd->add_option("--seed", seed, "Override train.seed");
    ablation_cmd->add_option("--out", out, "Output directory for ablation.txt");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        if (!app.get_subcommands().empty()) return app.exit(e);
        std::cout << app.help("", CLI::AppFormatMode::All);
        return 0;
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kExitConfig;
    }

    try {
        if (defaults->parsed()) {
            std::printf("%s", RunConfig{}.to_ini().c_str());
            return 0;
        }
        if (train_cmd->parsed()) return cmd_train(config, seed, out);
        if (eval_cmd->parsed()) return cmd_eval(config, ckpt, out);
        if (predict_cmd->parsed()) return cmd_predict(ckpt, image, out);
        if (bench_cmd->parsed()) return cmd_bench(sizes, out, force);
        if (verify_cmd->parsed()) return cmd_verify(fault_seed);
        if (ablation_cmd->parsed()) return cmd_ablation(config, seed, out);
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return kExitConfig;
    } catch (const DivergenceError& e) {
        std::fprintf(stderr, "diverged: %s\n", e.what());
        return kExitDiverged;
    } catch (const NumericError& e) {
        std::fprintf(stderr, "diverged: %s\n", e.what());
        return kExitDiverged;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitError;
    }
    return kExitError;
}

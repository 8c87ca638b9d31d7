#include "dcswin/config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "dcswin/dcfam.hpp"

namespace dcswin {

void TrainConfig::validate() const
{
    if (!(lr > 0) || !std::isfinite(lr)) throw ConfigError("train.lr must be a positive number");
    if (!(weight_decay >= 0)) throw ConfigError("train.weight_decay must be >= 0");
    if (!(beta1 >= 0 && beta1 < 1)) throw ConfigError("train.beta1 must lie in [0, 1)");
    if (!(beta2 >= 0 && beta2 < 1)) throw ConfigError("train.beta2 must lie in [0, 1)");
    if (!(eps > 0)) throw ConfigError("train.eps must be positive");
    if (!(label_smoothing >= 0 && label_smoothing < 0.5)) throw ConfigError("train.label_smoothing must lie in [0, 0.5)");
    if (steps < 0) throw ConfigError("train.steps must be >= 0");
    if (batch < 1) throw ConfigError("train.batch must be >= 1");
    if (eval_every < 0) throw ConfigError("train.eval_every must be >= 0");
}

void DataConfig::validate() const
{
    if (tile <= 0) throw ConfigError("data.tile must be positive");
    if (stride < 0 || stride > tile) throw ConfigError("data.stride must lie in [0, tile] (0 means tile)");
    if (root.empty()) {
        if (synth_count < 1) throw ConfigError("data.synth_count must be >= 1");
        if (synth_size < 16) throw ConfigError("data.synth_size must be >= 16");
    }
}

void RunConfig::validate() const
{
    try {
        model.validate();
        parse_variant(model.variant);
    } catch (const ConfigError&) {
        throw;
    } catch (const Error& e) {
        throw ConfigError(std::string("model: ") + e.what());
    }
    train.validate();
    data.validate();
    if (data.root.empty() && (model.num_classes < 2 || model.num_classes > 8)) {
        throw ConfigError("model.num_classes must lie in [2, 8] for synthetic data");
    }
    if (out_dir.empty()) throw ConfigError("output.dir must not be empty");
}

namespace {

std::string trim(const std::string& s)
{
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

template <typename I>
I parse_int(const std::string& key, const std::string& v)
{
    I out{};
    const auto [end, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || end != v.data() + v.size()) throw ConfigError(key + ": expected an integer, got '" + v + "'");
    return out;
}

double parse_double(const std::string& key, const std::string& v)
{
    std::size_t used = 0;
    double out = 0;
    try {
        out = std::stod(v, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (v.empty() || used != v.size()) throw ConfigError(key + ": expected a number, got '" + v + "'");
    return out;
}

bool parse_bool(const std::string& key, const std::string& v)
{
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

std::array<int, 4> parse_quad(const std::string& key, const std::string& v)
{
    std::array<int, 4> out{};
    std::istringstream in(v);
    std::string item;
    int n = 0;
    while (std::getline(in, item, ',')) {
        if (n == 4) throw ConfigError(key + ": expected 4 comma-separated integers");
        out[n++] = parse_int<int>(key, trim(item));
    }
    if (n != 4) throw ConfigError(key + ": expected 4 comma-separated integers");
    return out;
}

std::string quad(const std::array<int, 4>& a)
{
    return std::to_string(a[0]) + "," + std::to_string(a[1]) + "," + std::to_string(a[2]) + "," + std::to_string(a[3]);
}

std::string num(double v)
{
    char buf[32];
    const auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

struct Field {
    std::function<void(RunConfig&, const std::string&)> set;
    std::function<std::string(const RunConfig&)> get;
};

// Ordered as printed by to_ini().
const std::vector<std::pair<std::string, Field>>& fields()
{
    static const std::vector<std::pair<std::string, Field>> table = [] {
        std::vector<std::pair<std::string, Field>> t;
        auto add = [&](std::string key, auto set, auto get) { t.push_back({std::move(key), Field{set, get}}); };
#define DCSWIN_INT(key, member, type)                                                                        \
    add(key, [](RunConfig& c, const std::string& v) { c.member = parse_int<type>(key, v); },                 \
        [](const RunConfig& c) { return std::to_string(c.member); })
#define DCSWIN_DOUBLE(key, member)                                                                          \
    add(key, [](RunConfig& c, const std::string& v) { c.member = parse_double(key, v); },                     \
        [](const RunConfig& c) { return num(c.member); })
        add("model.preset", [](RunConfig& c, const std::string& v) { c.model = ModelConfig::from_preset(v); },
            [](const RunConfig& c) { return c.model.preset; });
        add("model.variant", [](RunConfig& c, const std::string& v) { c.model.variant = v; },
            [](const RunConfig& c) { return c.model.variant; });
        DCSWIN_INT("model.embed_dim", model.embed_dim, int64_t);
        add("model.depths", [](RunConfig& c, const std::string& v) { c.model.depths = parse_quad("model.depths", v); },
            [](const RunConfig& c) { return quad(c.model.depths); });
        add("model.num_heads",
            [](RunConfig& c, const std::string& v) { c.model.num_heads = parse_quad("model.num_heads", v); },
            [](const RunConfig& c) { return quad(c.model.num_heads); });
        DCSWIN_INT("model.window_size", model.window_size, int);
        DCSWIN_INT("model.patch_size", model.patch_size, int);
        DCSWIN_DOUBLE("model.mlp_ratio", model.mlp_ratio);
        DCSWIN_INT("model.num_classes", model.num_classes, int);
        DCSWIN_DOUBLE("train.lr", train.lr);
        DCSWIN_DOUBLE("train.weight_decay", train.weight_decay);
        DCSWIN_DOUBLE("train.beta1", train.beta1);
        DCSWIN_DOUBLE("train.beta2", train.beta2);
        DCSWIN_DOUBLE("train.eps", train.eps);
        DCSWIN_DOUBLE("train.label_smoothing", train.label_smoothing);
        DCSWIN_INT("train.steps", train.steps, int64_t);
        DCSWIN_INT("train.batch", train.batch, int);
        DCSWIN_INT("train.seed", train.seed, uint64_t);
        DCSWIN_INT("train.eval_every", train.eval_every, int64_t);
        add("train.augment", [](RunConfig& c, const std::string& v) { c.train.augment = parse_bool("train.augment", v); },
            [](const RunConfig& c) { return std::string(c.train.augment ? "true" : "false"); });
        add("data.root", [](RunConfig& c, const std::string& v) { c.data.root = v; },
            [](const RunConfig& c) { return c.data.root; });
        DCSWIN_INT("data.tile", data.tile, int64_t);
        DCSWIN_INT("data.stride", data.stride, int64_t);
        DCSWIN_INT("data.synth_count", data.synth_count, int);
        DCSWIN_INT("data.synth_size", data.synth_size, int64_t);
        DCSWIN_INT("data.synth_seed", data.synth_seed, uint64_t);
        DCSWIN_INT("data.ignore_label", data.ignore_label, int32_t);
        add("output.dir", [](RunConfig& c, const std::string& v) { c.out_dir = v; },
            [](const RunConfig& c) { return c.out_dir; });
#undef DCSWIN_INT
#undef DCSWIN_DOUBLE
        return t;
    }();
    return table;
}

}  // namespace

RunConfig RunConfig::parse(const std::string& text)
{
    std::map<std::string, Field> lookup(fields().begin(), fields().end());
    std::vector<std::pair<std::string, std::string>> entries;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected 'section.key = value'");
        const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
        if (!lookup.count(key)) throw ConfigError("unknown key '" + key + "' (line " + std::to_string(lineno) + ")");
        for (const auto& [k, v] : entries)
            if (k == key) throw ConfigError("duplicate key '" + key + "' (line " + std::to_string(lineno) + ")");
        entries.emplace_back(key, value);
    }
    RunConfig cfg;
    // The preset goes first so explicit model keys override it.
    for (const auto& [k, v] : entries) {
        if (k != "model.preset") continue;
        try {
            lookup.at(k).set(cfg, v);
        } catch (const ConfigError&) {
            throw;
        } catch (const Error& e) {
            throw ConfigError("model.preset: " + std::string(e.what()));
        }
    }
    for (const auto& [k, v] : entries)
        if (k != "model.preset") lookup.at(k).set(cfg, v);
    cfg.validate();
    return cfg;
}

RunConfig RunConfig::load(const std::string& path)
{
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file " + path);
    std::ostringstream text;
    text << in.rdbuf();
    return parse(text.str());
}

std::string RunConfig::to_ini() const
{
    std::string out;
    for (const auto& [key, field] : fields()) out += key + " = " + field.get(*this) + "\n";
    return out;
}

}  // namespace dcswin

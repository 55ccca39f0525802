#pragma once

// Run configuration: flat key=value text with schema validation.

#include <jointsparse/compressor.hpp>
#include <jointsparse/errors.hpp>

#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace jointsparse {

enum class EngineKind { Spatial, Winograd };

inline const char* engine_name(EngineKind e) { return e == EngineKind::Spatial ? "spatial" : "winograd"; }

struct RunConfig {
    std::string architecture = "paper-net";
    std::filesystem::path train_images = "data/train-images-idx3-ubyte";
    std::filesystem::path train_labels = "data/train-labels-idx1-ubyte";
    std::filesystem::path test_images = "data/t10k-images-idx3-ubyte";
    std::filesystem::path test_labels = "data/t10k-labels-idx1-ubyte";
    std::optional<std::uint64_t> seed;

    double learning_rate = 1e-3;
    std::size_t batch_size = 32;
    std::size_t iterations = 3000;
    std::size_t lr_decay_tail = 250;  // last 2*tail iterations at lr/10, last tail at lr/100

    double s_wd = 70.0;  // negative: domain off
    double s_sd = 70.0;
    double alpha = 1.0;
    double zeta_init = 10.0;
    double zeta_learning_rate = 1e-4;
    std::size_t winograd_tile = 4;

    double delta = 0.01;
    QuantMode quant_mode = QuantMode::Duq;
    std::size_t finetune_steps = 200;
    double finetune_learning_rate = 1e-3;

    EngineKind engine = EngineKind::Spatial;
    double deploy_swd = 0.0;
    double deploy_ssd = 0.0;
    bool include_transforms = false;

    std::filesystem::path out = "out";

    TrainSchedule schedule() const {
        TrainSchedule s{iterations, batch_size, seed.value_or(0)};
        if (lr_decay_tail > 0 && 2 * lr_decay_tail <= iterations)
            s.lr_steps = {{0, learning_rate},
                          {iterations - 2 * lr_decay_tail, learning_rate / 10.0},
                          {iterations - lr_decay_tail, learning_rate / 100.0}};
        return s;
    }

    /// Key/value pairs in file syntax, in schema order.
    std::vector<std::pair<std::string, std::string>> entries() const;

    void validate() const;
};

namespace detail {

inline std::string format_double(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

inline std::string format_percent(double v) { return v < 0.0 ? "off" : format_double(v); }

inline double parse_double(const std::string& key, const std::string& text) {
    double v = 0.0;
    const auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
    if (ec != std::errc() || end != text.data() + text.size() || !std::isfinite(v))
        throw ConfigError("config: " + key + " expects a finite number, got '" + text + "'");
    return v;
}

inline std::uint64_t parse_uint(const std::string& key, const std::string& text) {
    std::uint64_t v = 0;
    const auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
    if (ec != std::errc() || end != text.data() + text.size())
        throw ConfigError("config: " + key + " expects a non-negative integer, got '" + text + "'");
    return v;
}

inline double parse_percent(const std::string& key, const std::string& text) {
    if (text == "off") return -1.0;
    const double v = parse_double(key, text);
    if (v < 0.0 || v > 100.0) throw ConfigError("config: " + key + " must be in [0, 100] or off, got " + text);
    return v;
}

inline bool parse_bool(const std::string& key, const std::string& text) {
    if (text == "true" || text == "1") return true;
    if (text == "false" || text == "0") return false;
    throw ConfigError("config: " + key + " expects true or false, got '" + text + "'");
}

inline std::string trim(const std::string& s) {
    const auto first = s.find_first_not_of(" \t\r");
    if (first == std::string::npos) return {};
    const auto last = s.find_last_not_of(" \t\r");
    return s.substr(first, last - first + 1);
}

}  // namespace detail

inline std::vector<std::pair<std::string, std::string>> RunConfig::entries() const {
    using detail::format_double;
    return {
        {"architecture", architecture},
        {"train_images", train_images.string()},
        {"train_labels", train_labels.string()},
        {"test_images", test_images.string()},
        {"test_labels", test_labels.string()},
        {"seed", seed ? std::to_string(*seed) : ""},
        {"learning_rate", format_double(learning_rate)},
        {"batch_size", std::to_string(batch_size)},
        {"iterations", std::to_string(iterations)},
        {"lr_decay_tail", std::to_string(lr_decay_tail)},
        {"swd", detail::format_percent(s_wd)},
        {"ssd", detail::format_percent(s_sd)},
        {"alpha", format_double(alpha)},
        {"zeta_init", format_double(zeta_init)},
        {"zeta_learning_rate", format_double(zeta_learning_rate)},
        {"winograd_tile", std::to_string(winograd_tile)},
        {"delta", format_double(delta)},
        {"quant_mode", quant_mode_name(quant_mode)},
        {"finetune_steps", std::to_string(finetune_steps)},
        {"finetune_learning_rate", format_double(finetune_learning_rate)},
        {"engine", engine_name(engine)},
        {"deploy_swd", format_double(deploy_swd)},
        {"deploy_ssd", format_double(deploy_ssd)},
        {"include_transforms", include_transforms ? "true" : "false"},
        {"out", out.string()},
    };
}

/// Applies one key=value assignment; unknown keys and malformed values throw ConfigError.
inline void set_config_value(RunConfig& c, const std::string& key, const std::string& value) {
    using namespace detail;
    if (key == "architecture") c.architecture = value;
    else if (key == "train_images") c.train_images = value;
    else if (key == "train_labels") c.train_labels = value;
    else if (key == "test_images") c.test_images = value;
    else if (key == "test_labels") c.test_labels = value;
    else if (key == "seed") c.seed = parse_uint(key, value);
    else if (key == "learning_rate") c.learning_rate = parse_double(key, value);
    else if (key == "batch_size") c.batch_size = parse_uint(key, value);
    else if (key == "iterations") c.iterations = parse_uint(key, value);
    else if (key == "lr_decay_tail") c.lr_decay_tail = parse_uint(key, value);
    else if (key == "swd") c.s_wd = parse_percent(key, value);
    else if (key == "ssd") c.s_sd = parse_percent(key, value);
    else if (key == "alpha") c.alpha = parse_double(key, value);
    else if (key == "zeta_init") c.zeta_init = parse_double(key, value);
    else if (key == "zeta_learning_rate") c.zeta_learning_rate = parse_double(key, value);
    else if (key == "winograd_tile") c.winograd_tile = parse_uint(key, value);
    else if (key == "delta") c.delta = parse_double(key, value);
    else if (key == "quant_mode") {
        if (value == "uq") c.quant_mode = QuantMode::Uq;
        else if (value == "duq") c.quant_mode = QuantMode::Duq;
        else throw ConfigError("config: quant_mode must be uq or duq, got '" + value + "'");
    } else if (key == "finetune_steps") c.finetune_steps = parse_uint(key, value);
    else if (key == "finetune_learning_rate") c.finetune_learning_rate = parse_double(key, value);
    else if (key == "engine") {
        if (value == "spatial") c.engine = EngineKind::Spatial;
        else if (value == "winograd") c.engine = EngineKind::Winograd;
        else throw ConfigError("config: engine must be spatial or winograd, got '" + value + "'");
    } else if (key == "deploy_swd") c.deploy_swd = parse_percent(key, value);
    else if (key == "deploy_ssd") c.deploy_ssd = parse_percent(key, value);
    else if (key == "include_transforms") c.include_transforms = parse_bool(key, value);
    else if (key == "out") c.out = value;
    else throw ConfigError("config: unknown key '" + key + "'");
}

/// Parses key=value lines; '#' starts a comment. Keys may appear once.
inline RunConfig parse_config(std::istream& in, RunConfig base = {}) {
    std::map<std::string, std::size_t> seen;
    std::string line;
    std::size_t number = 0;
    while (std::getline(in, line)) {
        ++number;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(number) + ": expected key=value");
        const std::string key = detail::trim(line.substr(0, eq));
        const std::string value = detail::trim(line.substr(eq + 1));
        if (auto [it, fresh] = seen.emplace(key, number); !fresh)
            throw ConfigError("config line " + std::to_string(number) + ": duplicate key '" + key + "' (first on line " +
                              std::to_string(it->second) + ")");
        set_config_value(base, key, value);
    }
    return base;
}

inline RunConfig load_config(const std::filesystem::path& path, RunConfig base = {}) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config " + path.string());
    return parse_config(in, std::move(base));
}

inline void RunConfig::validate() const {
    if (architecture != "paper-net") throw ConfigError("config: unknown architecture '" + architecture + "'");
    if (!seed) throw ConfigError("config: seed is required");
    for (const auto& p : {train_images, train_labels, test_images, test_labels})
        if (!std::filesystem::is_regular_file(p)) throw ConfigError("config: dataset file not found: " + p.string());
    if (!(learning_rate > 0.0)) throw ConfigError("config: learning_rate must be positive");
    if (batch_size == 0) throw ConfigError("config: batch_size must be positive");
    if (!(alpha > 0.0)) throw ConfigError("config: alpha must be positive");
    if (!(zeta_learning_rate >= 0.0)) throw ConfigError("config: zeta_learning_rate must be non-negative");
    if (winograd_tile != 4 && winograd_tile != 6) throw ConfigError("config: winograd_tile must be 4 or 6");
    if (!(delta > 0.0)) throw ConfigError("config: delta must be positive");
    if (!(finetune_learning_rate >= 0.0)) throw ConfigError("config: finetune_learning_rate must be non-negative");
    if (deploy_swd < 0.0 || deploy_ssd < 0.0) throw ConfigError("config: deploy sparsity cannot be off");
    if (out.empty()) throw ConfigError("config: out must not be empty");
}

/// "# key=value" lines prefixed to every CSV output.
inline std::string config_header(const RunConfig& c) {
    std::string text;
    for (const auto& [k, v] : c.entries()) text += "# " + k + "=" + v + "\n";
    return text;
}

}  // namespace jointsparse

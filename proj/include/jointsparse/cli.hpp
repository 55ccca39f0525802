#pragma once

// Command-line surface: train, compress, decompress, deploy, report, selftest.

#include <jointsparse/checkpoint.hpp>
#include <jointsparse/config.hpp>
#include <jointsparse/deploy.hpp>
#include <jointsparse/idx.hpp>

#include <CLI11.hpp>

#include <algorithm>
#include <filesystem>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace jointsparse {

enum ExitCode : int { kExitOk = 0, kExitFailure = 1, kExitConfig = 2, kExitIo = 3, kExitNumeric = 4, kExitFormat = 5 };

inline int exit_code_for(const std::exception& e) {
    if (dynamic_cast<const ConfigError*>(&e)) return kExitConfig;
    if (dynamic_cast<const IoError*>(&e)) return kExitIo;
    if (dynamic_cast<const NumericError*>(&e)) return kExitNumeric;
    if (dynamic_cast<const FormatError*>(&e)) return kExitFormat;
    return kExitFailure;
}

namespace cli {

inline void write_csv(const RunConfig& c, const std::string& name, const std::string& body) {
    std::filesystem::create_directories(c.out);
    write_file_atomic(c.out / name, config_header(c) + body);
}

inline IdxDataset load_train(const RunConfig& c) { return ingest_idx(c.train_images, c.train_labels, "train"); }
inline IdxDataset load_test(const RunConfig& c) { return ingest_idx(c.test_images, c.test_labels, "test"); }

inline Architecture architecture_for(const RunConfig& c, const IdxDataset& data) {
    if (c.architecture != "paper-net") throw ConfigError("unknown architecture '" + c.architecture + "'");
    return paper_net(data.height(), data.width());
}

inline std::filesystem::path input_path(const std::string& given, const RunConfig& c, const char* fallback) {
    return given.empty() ? c.out / fallback : std::filesystem::path(given);
}

inline std::string fmt(double v) { return detail::format_double(v); }

inline void require_matching_input(const Architecture& arch, const IdxDataset& data) {
    if (arch.input_channels != 1 || arch.input_height != data.height() || arch.input_width != data.width())
        throw ConfigError("dataset images do not match the model input shape");
}

// ---------------------------------------------------------------------------
// train

inline int cmd_train(const RunConfig& c, const std::string& resume, std::ostream& out) {
    const IdxDataset train = load_train(c);
    Checkpoint ck;
    if (!resume.empty()) {
        ck = load_checkpoint(resume);
        if (ck.seed != *c.seed) throw ConfigError("seed " + std::to_string(*c.seed) + " differs from checkpoint seed " +
                                                  std::to_string(ck.seed));
        require_matching_input(ck.state.net.arch, train);
    } else {
        ck.seed = *c.seed;
        ck.state.net = Network::initialize(architecture_for(c, train), ck.seed);
        ck.state.weight_opt = OptimizerState(OptimizerConfig{OptimizerKind::Adam, c.learning_rate});
        ck.state.reg.zeta_wd = ck.state.reg.zeta_sd = c.zeta_init;
        ck.state.reg.alpha = c.alpha;
        ck.state.reg.zeta_opt = OptimizerState(OptimizerConfig{OptimizerKind::Adam, c.zeta_learning_rate});
    }
    const SparsityConfig cfg = make_sparsity_config(ck.state.net.arch, c.s_wd, c.s_sd, c.winograd_tile);
    TrainSchedule schedule = c.schedule();
    schedule.iterations = ck.state.iteration >= c.iterations ? 0 : c.iterations - ck.state.iteration;
    const TrainResult result = train_regularized(ck.state, train.images, train.labels, cfg, schedule);

    std::ostringstream csv;
    write_history_csv(csv, result.history);
    write_csv(c, "history.csv", csv.str());
    if (result.diverged) throw NumericError("training diverged: " + result.message);
    save_checkpoint(c.out / "checkpoint.wspc", ck);

    out << "trained to iteration " << ck.state.iteration;
    if (!result.history.empty())
        out << ", loss " << result.history.front().loss << " -> " << result.history.back().loss;
    out << "\n";
    return kExitOk;
}

// ---------------------------------------------------------------------------
// compress

struct CompressOutcome {
    std::vector<std::uint8_t> container;
    std::size_t weights = 0;
    double ratio = 0.0;
    FinetuneResult finetune;
};

inline CompressOutcome compress_checkpoint(const RunConfig& c, const Checkpoint& ck, const IdxDataset& train,
                                           double delta) {
    const Architecture& arch = ck.state.net.arch;
    QuantizedModel qm = quantize_model(ck.state.net, delta, c.quant_mode, *c.seed);
    CompressOutcome o;
    if (c.finetune_steps > 0) {
        const SparsityConfig cfg = make_sparsity_config(arch, c.s_wd, -1.0, c.winograd_tile);
        RegularizerState reg = ck.state.reg;
        const FinetuneSchedule schedule{c.finetune_steps, c.batch_size, *c.seed, c.finetune_learning_rate};
        o.finetune = finetune_codebook(qm, arch, train.images, train.labels, cfg, reg, schedule);
        if (o.finetune.diverged) throw NumericError("fine-tuning diverged: " + o.finetune.message);
    }
    o.container = compress(arch, qm);
    o.weights = ck.state.net.params.weight_count();
    o.ratio = compression_ratio(o.weights, o.container.size());
    return o;
}

inline std::string layer_sparsity_table(const Network& net, double s_wd, std::size_t tile) {
    const BasisPlan bases = default_basis_plan(net.arch, tile);
    const WinogradDeployment dep = prune_winograd(net, s_wd, bases);
    std::ostringstream csv;
    csv << "layer,kind,weights,zero_weights,spatial_sparsity,winograd_entries,winograd_zeros,winograd_sparsity\n";
    for (std::size_t k = 0; k < net.params.weights.size(); ++k) {
        const auto w = net.params.weights[k].values();
        const auto zeros = static_cast<std::size_t>(std::count(w.begin(), w.end(), 0.0));
        csv << k << ',' << layer_kind_name(net.weighted_spec(k).kind) << ',' << w.size() << ',' << zeros << ','
            << fmt(static_cast<double>(zeros) / static_cast<double>(w.size())) << ',';
        if (auto it = dep.filters.find(k); it != dep.filters.end()) {
            const auto t = it->second.values();
            const auto tz = static_cast<std::size_t>(std::count(t.begin(), t.end(), 0.0));
            csv << t.size() << ',' << tz << ',' << fmt(static_cast<double>(tz) / static_cast<double>(t.size()));
        } else {
            csv << ",,";
        }
        csv << '\n';
    }
    return csv.str();
}

inline int cmd_compress(const RunConfig& c, const std::string& checkpoint, std::ostream& out) {
    const Checkpoint ck = load_checkpoint(input_path(checkpoint, c, "checkpoint.wspc"));
    const IdxDataset train = load_train(c);
    require_matching_input(ck.state.net.arch, train);
    const CompressOutcome o = compress_checkpoint(c, ck, train, c.delta);
    std::filesystem::create_directories(c.out);
    write_file_atomic(c.out / "model.wspz", o.container);

    const Network decoded = decompress(o.container);
    std::ostringstream csv;
    csv << "delta,mode,weights,container_bytes,compression_ratio,finetune_steps,finetune_loss_first,"
           "finetune_loss_last,clamped\n";
    csv << fmt(c.delta) << ',' << quant_mode_name(c.quant_mode) << ',' << o.weights << ',' << o.container.size() << ','
        << fmt(o.ratio) << ',' << o.finetune.history.size() << ','
        << (o.finetune.history.empty() ? "" : fmt(o.finetune.history.front().loss)) << ','
        << (o.finetune.history.empty() ? "" : fmt(o.finetune.history.back().loss)) << ',' << o.finetune.clamped
        << '\n';
    write_csv(c, "compress.csv", csv.str());
    write_csv(c, "layers.csv", layer_sparsity_table(decoded, c.s_wd < 0.0 ? 0.0 : c.s_wd, c.winograd_tile));
    out << "wrote " << o.container.size() << " bytes, compression ratio " << o.ratio << "\n";
    return kExitOk;
}

// ---------------------------------------------------------------------------
// decompress

inline int cmd_decompress(const RunConfig& c, const std::string& container, std::ostream& out) {
    const auto bytes = read_binary_file(input_path(container, c, "model.wspz"));
    Checkpoint ck;
    ck.state.net = decompress(bytes);
    ck.seed = *c.seed;
    std::filesystem::create_directories(c.out);
    save_checkpoint(c.out / "decompressed.wspc", ck);
    out << "decoded " << ck.state.net.params.weight_count() << " weights\n";
    return kExitOk;
}

// ---------------------------------------------------------------------------
// deploy

struct DeployOutcome {
    Evaluation eval;
    MacReport macs;
    double achieved_sparsity = 0.0;
};

inline DeployOutcome deploy_network(const Network& net, const IdxDataset& test, EngineKind engine, double s_wd,
                                    double s_sd, std::size_t tile, bool include_transforms) {
    const BasisPlan bases = default_basis_plan(net.arch, tile);
    DeployOutcome o;
    if (engine == EngineKind::Spatial) {
        const SpatialPruning sp = prune_spatial(net, s_sd);
        o.eval = evaluate(sp.net, test.images, test.labels, sparse_spatial_kernel(sp.net));
        o.macs = count_macs(sp.net, nullptr, bases, include_transforms);
        o.achieved_sparsity = sp.sparsity();
    } else {
        if (bases.empty()) throw ConfigError("winograd engine: no layer of the model has a Winograd basis");
        const WinogradDeployment dep = prune_winograd(net, s_wd, bases);
        o.eval = evaluate(net, test.images, test.labels, sparse_winograd_kernel(net, dep));
        o.macs = count_macs(net, &dep, bases, include_transforms);
        o.achieved_sparsity = dep.sparsity();
    }
    return o;
}

inline std::string mac_table(const MacReport& r) {
    std::ostringstream csv;
    csv << "layer,kind,dense_spatial,sparse_spatial,dense_winograd,sparse_winograd,transform_overhead\n";
    for (const LayerMacs& l : r.layers)
        csv << l.layer << ',' << layer_kind_name(l.kind) << ',' << l.dense_spatial << ',' << l.sparse_spatial << ','
            << l.dense_winograd << ',' << l.sparse_winograd << ',' << l.transform_overhead << '\n';
    csv << "total,," << r.total(MacMode::DenseSpatial) << ',' << r.total(MacMode::SparseSpatial) << ','
        << r.total(MacMode::DenseWinograd) << ',' << r.total(MacMode::SparseWinograd) << ','
        << r.total_transform_overhead() << '\n';
    return csv.str();
}

inline int cmd_deploy(const RunConfig& c, const std::string& container, std::ostream& out) {
    const Network net = decompress(read_binary_file(input_path(container, c, "model.wspz")));
    const IdxDataset test = load_test(c);
    require_matching_input(net.arch, test);
    const DeployOutcome o =
        deploy_network(net, test, c.engine, c.deploy_swd, c.deploy_ssd, c.winograd_tile, c.include_transforms);
    const MacMode mode = c.engine == EngineKind::Spatial ? MacMode::SparseSpatial : MacMode::SparseWinograd;

    std::ostringstream csv;
    csv << "engine,deploy_swd,deploy_ssd,achieved_sparsity,images,correct,accuracy,loss,macs\n";
    csv << engine_name(c.engine) << ',' << fmt(c.deploy_swd) << ',' << fmt(c.deploy_ssd) << ','
        << fmt(o.achieved_sparsity) << ',' << o.eval.count << ',' << o.eval.correct << ',' << fmt(o.eval.accuracy())
        << ',' << fmt(o.eval.loss) << ',' << o.macs.total(mode) << '\n';
    write_csv(c, "deploy.csv", csv.str());
    write_csv(c, "macs.csv", mac_table(o.macs));
    out << engine_name(c.engine) << " accuracy " << o.eval.accuracy() << " (" << o.eval.correct << "/" << o.eval.count
        << "), " << o.macs.total(mode) << " MACs per image\n";
    return kExitOk;
}

// ---------------------------------------------------------------------------
// report

/// Regularized domains of a trained state; a disabled domain has an empty weight pool.
inline std::string regularization_label(const RegularizerState& reg) {
    if (reg.n_wd > 0 && reg.n_sd > 0) return "WD+SD";
    if (reg.n_wd > 0) return "WD";
    if (reg.n_sd > 0) return "SD";
    return "none";
}

inline int cmd_report(const RunConfig& c, const std::string& checkpoint, const std::vector<double>& deltas,
                      std::ostream& out) {
    const Checkpoint ck = load_checkpoint(input_path(checkpoint, c, "checkpoint.wspc"));
    const Network& net = ck.state.net;
    const IdxDataset test = load_test(c);
    require_matching_input(net.arch, test);

    std::ostringstream t1;
    t1 << "regularization,domain,pruning_ratio,achieved_sparsity,accuracy,loss,macs\n";
    const std::string label = regularization_label(ck.state.reg);
    for (EngineKind engine : {EngineKind::Spatial, EngineKind::Winograd}) {
        const double ratio = engine == EngineKind::Spatial ? c.deploy_ssd : c.deploy_swd;
        const MacMode mode = engine == EngineKind::Spatial ? MacMode::SparseSpatial : MacMode::SparseWinograd;
        std::vector<double> ratios{0.0};
        if (ratio != 0.0) ratios.push_back(ratio);
        for (double s : ratios) {
            const DeployOutcome o = deploy_network(net, test, engine, engine == EngineKind::Winograd ? s : 0.0,
                                                   engine == EngineKind::Spatial ? s : 0.0, c.winograd_tile,
                                                   c.include_transforms);
            t1 << label << ',' << (engine == EngineKind::Spatial ? "SD" : "WD") << ',' << fmt(s) << ','
               << fmt(o.achieved_sparsity) << ',' << fmt(o.eval.accuracy()) << ',' << fmt(o.eval.loss) << ','
               << o.macs.total(mode) << '\n';
            out << label << " " << (engine == EngineKind::Spatial ? "SD" : "WD") << " s=" << s << ": accuracy "
                << o.eval.accuracy() << "\n";
        }
    }
    write_csv(c, "table1.csv", t1.str());

    if (!deltas.empty()) {
        const IdxDataset train = load_train(c);
        std::ostringstream t2;
        t2 << "delta,mode,container_bytes,compression_ratio,accuracy\n";
        for (double delta : deltas) {
            if (!(delta > 0.0)) throw ConfigError("delta must be positive");
            const CompressOutcome o = compress_checkpoint(c, ck, train, delta);
            const Network decoded = decompress(o.container);
            const Evaluation ev = evaluate(decoded, test.images, test.labels, sparse_spatial_kernel(decoded));
            t2 << fmt(delta) << ',' << quant_mode_name(c.quant_mode) << ',' << o.container.size() << ','
               << fmt(o.ratio) << ',' << fmt(ev.accuracy()) << '\n';
            out << quant_mode_name(c.quant_mode) << " delta=" << delta << ": ratio " << o.ratio << ", accuracy "
                << ev.accuracy() << "\n";
        }
        write_csv(c, "table2.csv", t2.str());
    }
    return kExitOk;
}

// ---------------------------------------------------------------------------
// selftest

inline int cmd_selftest(std::ostream& out) {
    std::mt19937_64 rng(1);
    std::normal_distribution<double> normal(0.0, 1.0);
    auto random_tensor = [&](Shape shape) {
        Tensor t(std::move(shape));
        for (double& v : t.values()) v = normal(rng);
        return t;
    };
    bool all = true;
    auto check = [&](const std::string& name, bool ok) {
        out << (ok ? "PASS " : "FAIL ") << name << "\n";
        all = all && ok;
    };

    bool equivalent = true;
    for (auto [r, n] : {std::pair<std::size_t, std::size_t>{3, 4}, {3, 6}, {5, 8}}) {
        const WinogradBasis basis = build_basis(r, n);
        for (int trial = 0; trial < 10; ++trial) {
            const Tensor input = random_tensor({2, r + 5, r + 6});
            const Tensor filters = random_tensor({3, 2, r, r});
            const Tensor a = winograd_conv2d(basis, input, filters), b = direct_conv2d(input, filters);
            for (std::size_t i = 0; i < a.size(); ++i)
                equivalent = equivalent && std::abs(a.values()[i] - b.values()[i]) <= 1e-8;
        }
    }
    check("winograd matches direct convolution", equivalent);

    Matrix delta(3, 3);
    delta.at(1, 1) = 1.0;
    const Matrix golden{{0, 0, 0, 0}, {0, 0.25, -0.25, 0}, {0, -0.25, 0.25, 0}, {0, 0, 0, 0}};
    check("delta filter transform", transform_filter(build_basis(3, 4), delta) == golden);

    bool lzw_ok = true;
    for (int trial = 0; trial < 100; ++trial) {
        const std::uint32_t K = 1 + static_cast<std::uint32_t>(rng() % 50);
        std::vector<std::uint32_t> symbols(rng() % 2000);
        for (auto& s : symbols) s = static_cast<std::uint32_t>(rng() % K);
        const LzwParams p = lzw_params(K);
        lzw_ok = lzw_ok && lzw_decode(lzw_encode(symbols, p), p) == symbols;
    }
    check("lzw round trip", lzw_ok);

    const Network net = Network::initialize(paper_net(), 5);
    const QuantizedModel qm = quantize_model(net, 0.05, QuantMode::Duq, 9);
    auto bytes = compress(net.arch, qm);
    const Network decoded = decompress(bytes);
    check("container round trip", flatten_weights(decoded.params) == dequantize(qm) &&
                                      serialize(parse_container(bytes)) == bytes);
    bytes[bytes.size() / 2] ^= 0x10;
    bool crc_detected = false;
    try {
        decompress(bytes);
    } catch (const CrcError&) {
        crc_detected = true;
    }
    check("container corruption detected", crc_detected);

    Checkpoint ck;
    ck.state.net = net;
    ck.seed = 3;
    const auto ck_bytes = serialize_checkpoint(ck);
    check("checkpoint round trip", serialize_checkpoint(parse_checkpoint(ck_bytes)) == ck_bytes);
    return all ? kExitOk : kExitFailure;
}

}  // namespace cli

/// Parses arguments and runs one subcommand; returns the process exit code.
inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    CLI::App app{"Jointly sparse CNN training, compression and deployment"};
    app.require_subcommand(1);
    app.fallthrough();

    std::string config_path, seed, engine, delta, swd, ssd, out_dir;
    app.add_option("--config", config_path, "key=value configuration file");
    app.add_option("--seed", seed, "random seed");
    app.add_option("--engine", engine, "inference engine: spatial or winograd");
    app.add_option("--delta", delta, "quantization step");
    app.add_option("--swd", swd, "Winograd-domain sparsity percent, or off");
    app.add_option("--ssd", ssd, "spatial-domain sparsity percent, or off");
    app.add_option("--out", out_dir, "output directory");

    std::string resume, checkpoint, container;
    std::vector<double> deltas;
    auto* train = app.add_subcommand("train", "train with the sparsity regularizers");
    train->add_option("--resume", resume, "checkpoint to continue from");
    auto* compress_cmd = app.add_subcommand("compress", "quantize, fine-tune and encode a checkpoint");
    compress_cmd->add_option("--checkpoint", checkpoint, "checkpoint (default OUT/checkpoint.wspc)");
    auto* decompress_cmd = app.add_subcommand("decompress", "decode a container into a checkpoint");
    decompress_cmd->add_option("--container", container, "container (default OUT/model.wspz)");
    auto* deploy = app.add_subcommand("deploy", "evaluate a container with a sparse engine");
    deploy->add_option("--container", container, "container (default OUT/model.wspz)");
    auto* report = app.add_subcommand("report", "accuracy and MAC tables for a checkpoint");
    report->add_option("--checkpoint", checkpoint, "checkpoint (default OUT/checkpoint.wspc)");
    report->add_option("--deltas", deltas, "quantization steps to sweep")->delimiter(',');
    auto* selftest = app.add_subcommand("selftest", "run built-in consistency checks");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kExitOk : kExitConfig;
    }

    try {
        if (selftest->parsed()) return cli::cmd_selftest(out);

        RunConfig c = config_path.empty() ? RunConfig{} : load_config(config_path);
        const std::pair<const char*, const std::string*> overrides[] = {
            {"seed", &seed}, {"engine", &engine}, {"delta", &delta}, {"out", &out_dir}};
        for (const auto& [key, value] : overrides)
            if (!value->empty()) set_config_value(c, key, *value);
        if (!swd.empty()) set_config_value(c, deploy->parsed() || report->parsed() ? "deploy_swd" : "swd", swd);
        if (!ssd.empty()) set_config_value(c, deploy->parsed() || report->parsed() ? "deploy_ssd" : "ssd", ssd);
        c.validate();

        if (train->parsed()) return cli::cmd_train(c, resume, out);
        if (compress_cmd->parsed()) return cli::cmd_compress(c, checkpoint, out);
        if (decompress_cmd->parsed()) return cli::cmd_decompress(c, container, out);
        if (deploy->parsed()) return cli::cmd_deploy(c, container, out);
        if (report->parsed()) return cli::cmd_report(c, checkpoint, deltas, out);
    } catch (const Error& e) {
        err << "error: " << e.what() << "\n";
        return exit_code_for(e);
    } catch (const std::filesystem::filesystem_error& e) {
        err << "error: " << e.what() << "\n";
        return kExitIo;
    }
    return kExitFailure;
}

}  // namespace jointsparse

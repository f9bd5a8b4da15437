#include "mpo/cli.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "mpo/checkpoint.hpp"
#include "mpo/csv.hpp"
#include "mpo/stability.hpp"
#include "mpo/trainer.hpp"

namespace mpo {

namespace fs = std::filesystem;

namespace {

/// Relative output paths resolve against MPO_OUT_DIR when it is set.
fs::path resolve_out(const std::string& path) {
    fs::path p(path);
    if (p.is_relative()) {
        if (const char* base = std::getenv("MPO_OUT_DIR")) return fs::path(base) / p;
    }
    return p;
}

std::vector<int> parse_depths(const std::string& list) {
    std::vector<int> depths;
    size_t start = 0;
    while (start <= list.size()) {
        const size_t comma = list.find(',', start);
        const std::string token = list.substr(start, comma == std::string::npos ? comma : comma - start);
        if (!token.empty()) {
            for (char c : token)
                if (c < '0' || c > '9')
                    throw CLI::ValidationError("--depths needs a comma-separated integer list");
            depths.push_back(std::stoi(token));
        }
        if (comma == std::string::npos) break;
        start = comma + 1;
    }
    if (depths.empty()) throw CLI::ValidationError("--depths needs a comma-separated list");
    return depths;
}

void print_param_report(std::ostream& out, const ParamReport& report,
                        const std::vector<int64_t>& bonds) {
    out << "bonds=";
    for (size_t i = 0; i < bonds.size(); ++i) out << (i ? "," : "") << bonds[i];
    out << "\n";
    out << "per_core_counts=";
    for (size_t i = 0; i < report.per_core_counts.size(); ++i)
        out << (i ? "," : "") << report.per_core_counts[i];
    out << "\n";
    out << "total=" << report.total << "\n";
    out << "central_count=" << report.central_count << "\n";
    out << "central_fraction=" << format_double(report.central_fraction) << "\n";
    out << "dense_count=" << report.dense_count << "\n";
    out << "ratio_to_dense=" << format_double(report.ratio_to_dense) << "\n";
}

struct ModelFlags {
    int layers = 2;
    int hidden = 32;
    int heads = 2;
    int d_ff = 128;
    int vocab = 32;
    int seq = 16;
    int order = 5;
    int rank = 8;
    int groups = 1;
    bool no_adapter = false;
    bool no_sharing = false;

    void attach(CLI::App* cmd) {
        cmd->add_option("--layers", layers, "transformer depth");
        cmd->add_option("--hidden", hidden, "hidden size");
        cmd->add_option("--heads", heads, "attention heads");
        cmd->add_option("--dff", d_ff, "feed-forward inner size");
        cmd->add_option("--vocab", vocab, "vocabulary size (includes special ids)");
        cmd->add_option("--seq", seq, "maximum sequence length");
        cmd->add_option("--order", order, "MPO order n");
        cmd->add_option("--rank", rank, "adapter rank");
        cmd->add_option("--groups", groups, "layer groups for central sharing");
        cmd->add_flag("--no-adapter", no_adapter, "drop the low-rank adapters");
        cmd->add_flag("--no-sharing", no_sharing, "give every layer its own centrals");
    }

    ModelConfig config() const {
        ModelConfig cfg;
        cfg.layers = layers;
        cfg.hidden = hidden;
        cfg.heads = heads;
        cfg.d_ff = d_ff;
        cfg.vocab_size = vocab;
        cfg.max_seq_len = seq;
        cfg.mpo_order = order;
        cfg.adapter_rank = rank;
        cfg.num_groups = groups;
        cfg.use_adapters = !no_adapter;
        cfg.use_sharing = !no_sharing;
        return cfg;
    }
};

struct TrainFlags {
    int steps = 200;
    int batch = 8;
    double lr = 0.5;
    double clip = 1.0;
    uint64_t seed = 1;
    int corpus_size = 256;

    void attach(CLI::App* cmd) {
        cmd->add_option("--steps", steps, "SGD steps");
        cmd->add_option("--batch", batch, "batch size");
        cmd->add_option("--lr", lr, "learning rate");
        cmd->add_option("--clip", clip, "global gradient-norm clip (0 disables)");
        cmd->add_option("--seed", seed, "seed for data, masking and init");
        cmd->add_option("--corpus-size", corpus_size, "number of corpus sequences");
    }

    TrainConfig config(int seq_len) const {
        TrainConfig tc;
        tc.steps = steps;
        tc.batch = batch;
        tc.seq_len = seq_len;
        tc.lr = lr;
        tc.seed = seed;
        if (clip > 0.0)
            tc.clip_norm = clip;
        else
            tc.clip_norm = std::nullopt;
        return tc;
    }
};

void write_text_output(const std::string& out_path, const std::string& text) {
    if (out_path.empty()) {
        std::cout << text;
        return;
    }
    const fs::path path = resolve_out(out_path);
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out << text;
}

int run(const std::vector<std::string>& args) {
    CLI::App app{"MPO decomposition, cross-layer sharing and stability experiments"};
    app.require_subcommand(1);

    // ---- decompose ----------------------------------------------------
    auto* decompose_cmd = app.add_subcommand("decompose", "TT-SVD a matrix checkpoint");
    std::string decompose_input;
    int decompose_order = 5;
    int64_t decompose_cap = 0;
    std::string decompose_plan = "ascending";
    std::string decompose_out;
    decompose_cmd->add_option("matrix", decompose_input, "matrix checkpoint directory")->required();
    decompose_cmd->add_option("--n", decompose_order, "MPO order");
    decompose_cmd->add_option("--bond-cap", decompose_cap, "bond cap (0 = exact)");
    decompose_cmd->add_option("--plan", decompose_plan, "factor arrangement: ascending|balanced")
        ->check(CLI::IsMember({"ascending", "balanced"}));
    decompose_cmd->add_option("--out", decompose_out, "directory for the MPO checkpoint");

    // ---- reconstruct --------------------------------------------------
    auto* reconstruct_cmd = app.add_subcommand("reconstruct", "contract an MPO checkpoint");
    std::string reconstruct_input, reconstruct_reference, reconstruct_out;
    reconstruct_cmd->add_option("mpo", reconstruct_input, "MPO checkpoint directory")->required();
    reconstruct_cmd->add_option("--reference", reconstruct_reference,
                                "matrix checkpoint to compare against");
    reconstruct_cmd->add_option("--out", reconstruct_out, "directory for the matrix checkpoint");

    // ---- report --------------------------------------------------------
    auto* report_cmd = app.add_subcommand("report", "parameter accounting for a model checkpoint");
    std::string report_input;
    std::string report_mode = "all";
    report_cmd->add_option("checkpoint", report_input, "model checkpoint directory")->required();
    report_cmd->add_option("--sharing-mode", report_mode,
                           "shared-central|unshared|all-shared|all")
        ->check(CLI::IsMember({"shared-central", "unshared", "all-shared", "all"}));

    // ---- train-donor ----------------------------------------------------
    auto* donor_cmd = app.add_subcommand("train-donor",
                                         "train a fully weight-shared donor and save it");
    ModelFlags donor_model;
    donor_model.attach(donor_cmd);
    TrainFlags donor_train;
    donor_train.attach(donor_cmd);
    std::string donor_out;
    int donor_depth = 1;
    donor_cmd->add_option("--depth", donor_depth, "donor depth D_d");
    donor_cmd->add_option("--out", donor_out, "directory for the donor checkpoint")->required();

    // ---- init -----------------------------------------------------------
    auto* init_cmd = app.add_subcommand("init", "initialize a model checkpoint");
    ModelFlags init_model;
    init_model.attach(init_cmd);
    std::string init_donor, init_out, init_extend = "scaled-donor";
    bool init_scratch = false;
    bool init_scale_central = false;
    uint64_t init_seed = 1;
    init_cmd->add_option("--from-donor", init_donor, "donor checkpoint directory");
    init_cmd->add_flag("--scratch", init_scratch, "scaled-Xavier initialization");
    init_cmd->add_option("--extend", init_extend, "layers beyond the donor depth")
        ->check(CLI::IsMember({"scaled-donor", "scaled-random"}));
    init_cmd->add_flag("--scale-central", init_scale_central,
                       "also depth-scale centrals under --scratch");
    init_cmd->add_option("--seed", init_seed, "init seed");
    init_cmd->add_option("--out", init_out, "directory for the model checkpoint")->required();

    // ---- train ------------------------------------------------------------
    auto* train_cmd = app.add_subcommand("train", "MLM training on the toy Markov corpus");
    ModelFlags train_model;
    train_model.attach(train_cmd);
    TrainFlags train_flags;
    train_flags.attach(train_cmd);
    std::string train_checkpoint, train_curve, train_save;
    train_cmd->add_option("--model", train_checkpoint, "model checkpoint to start from");
    train_cmd->add_option("--curve", train_curve, "CSV path for the loss curve");
    train_cmd->add_option("--save", train_save, "directory for the trained checkpoint");

    // ---- compare-init -------------------------------------------------------
    auto* compare_cmd = app.add_subcommand("compare-init",
                                           "scratch vs donor-init convergence comparison");
    ModelFlags compare_model;
    compare_model.attach(compare_cmd);
    TrainFlags compare_flags;
    compare_flags.attach(compare_cmd);
    std::string compare_donor, compare_out, compare_extend = "scaled-donor";
    compare_cmd->add_option("--donor", compare_donor, "donor checkpoint directory")->required();
    compare_cmd->add_option("--extend", compare_extend, "extension branch")
        ->check(CLI::IsMember({"scaled-donor", "scaled-random"}));
    compare_cmd->add_option("--out", compare_out, "CSV path for both curves");

    // ---- sweep -----------------------------------------------------------
    auto* sweep_cmd = app.add_subcommand("sweep", "update-norm depth sweeps");
    bool sweep_scalar = false, sweep_transformer = false;
    std::string sweep_depths = "4,16,64,256";
    std::string sweep_scheme = "scaled";
    double sweep_eta = 1e-3;
    double sweep_central = 1.0;
    uint64_t sweep_seed = 1;
    std::string sweep_out;
    sweep_cmd->add_flag("--scalar", sweep_scalar, "scalar Post-LN chain sweep");
    sweep_cmd->add_flag("--transformer", sweep_transformer, "toy transformer sweep");
    sweep_cmd->add_option("--depths", sweep_depths, "comma-separated depths");
    sweep_cmd->add_option("--scheme", sweep_scheme, "scaled|unit|both")
        ->check(CLI::IsMember({"scaled", "unit", "both"}));
    sweep_cmd->add_option("--eta", sweep_eta, "learning rate for the probe step");
    sweep_cmd->add_option("--central", sweep_central, "shared central value (scalar sweep)");
    sweep_cmd->add_option("--seed", sweep_seed, "seed (transformer sweep)");
    sweep_cmd->add_option("--out", sweep_out, "CSV path (stdout when omitted)");

    // ---- ablate ------------------------------------------------------------
    auto* ablate_cmd = app.add_subcommand("ablate", "train an ablation variant and report");
    ModelFlags ablate_model;
    ablate_model.attach(ablate_cmd);
    TrainFlags ablate_flags;
    ablate_flags.attach(ablate_cmd);

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::CallForHelp& e) {
        std::cout << app.help();
        return 0;
    } catch (const CLI::ParseError& e) {
        std::cerr << e.what() << "\n" << app.help();
        return 2;
    }

    if (decompose_cmd->parsed()) {
        const DenseTensor matrix = load_matrix(resolve_out(decompose_input));
        const FactorPlan plan =
            decompose_plan == "balanced"
                ? balanced_plan(matrix.rows(), matrix.cols(), decompose_order)
                : ascending_plan(matrix.rows(), matrix.cols(), decompose_order);
        std::optional<int64_t> cap;
        if (decompose_cap > 0) cap = decompose_cap;
        const Decomposition result = mpo_decompose(matrix, plan, cap);
        if (!decompose_out.empty()) save_mpo(result.set, resolve_out(decompose_out));
        print_param_report(std::cout, param_report(result.set), result.set.bonds());
        std::cout << "truncation_error_bound=" << format_double(result.error_bound) << "\n";
        return 0;
    }

    if (reconstruct_cmd->parsed()) {
        const MpoTensorSet set = load_mpo(resolve_out(reconstruct_input));
        const DenseTensor matrix = mpo_reconstruct(set);
        if (!reconstruct_out.empty()) save_matrix(matrix, resolve_out(reconstruct_out));
        std::cout << "rows=" << matrix.rows() << "\ncols=" << matrix.cols() << "\n";
        if (!reconstruct_reference.empty()) {
            const DenseTensor reference = load_matrix(resolve_out(reconstruct_reference));
            std::cout << "relative_error="
                      << format_double(relative_frobenius_error(matrix, reference)) << "\n";
        }
        return 0;
    }

    if (report_cmd->parsed()) {
        const ToyTransformer model = load_model(resolve_out(report_input));
        const ParamBreakdown breakdown = model_param_breakdown(model);
        std::ostringstream out;
        if (report_mode == "all" || report_mode == "shared-central")
            out << "shared_central_total=" << breakdown.shared_central_total << "\n";
        if (report_mode == "all" || report_mode == "unshared")
            out << "unshared_total=" << breakdown.unshared_total << "\n";
        if (report_mode == "all" || report_mode == "all-shared")
            out << "all_shared_total=" << breakdown.all_shared_total << "\n";
        out << "central_per_layer=" << breakdown.central_per_layer << "\n";
        out << "groups=" << breakdown.groups << "\n";
        out << "layers=" << breakdown.layers << "\n";
        out << "embedding_params=" << breakdown.embedding_params << "\n";
        out << "layernorm_params=" << breakdown.layernorm_params << "\n";
        std::cout << out.str();
        return 0;
    }

    if (donor_cmd->parsed()) {
        ModelConfig cfg = donor_model.config();
        cfg.layers = donor_depth;
        cfg.num_groups = 1;
        const Corpus corpus = make_toy_corpus(donor_train.seed ^ 0x636f7270ull,
                                              donor_train.corpus_size, cfg.max_seq_len,
                                              cfg.vocab_size);
        const DonorCheckpoint donor =
            train_donor(cfg, corpus, donor_train.config(cfg.max_seq_len), donor_train.seed);
        save_donor(donor, resolve_out(donor_out));
        std::cout << "donor_depth=" << donor.donor_depth << "\n";
        return 0;
    }

    if (init_cmd->parsed()) {
        const ModelConfig cfg = init_model.config();
        ToyTransformer model = [&] {
            if (!init_donor.empty()) {
                const DonorCheckpoint donor = load_donor(resolve_out(init_donor));
                const ExtendMode mode = init_extend == "scaled-random" ? ExtendMode::ScaledRandom
                                                                       : ExtendMode::ScaledDonor;
                return init_from_donor(donor, cfg, mode, init_seed);
            }
            if (!init_scratch)
                throw Error("init needs --from-donor or --scratch");
            return scaled_xavier_init(cfg, init_seed, init_scale_central);
        }();
        save_model(model, resolve_out(init_out));
        std::cout << "params=" << model.total_param_count() << "\n";
        return 0;
    }

    if (train_cmd->parsed()) {
        ModelConfig cfg = train_model.config();
        ToyTransformer model = train_checkpoint.empty()
                                   ? scaled_xavier_init(cfg, train_flags.seed)
                                   : load_model(resolve_out(train_checkpoint));
        cfg = model.config;
        const Corpus corpus = make_toy_corpus(train_flags.seed ^ 0x636f7270ull,
                                              train_flags.corpus_size, cfg.max_seq_len,
                                              cfg.vocab_size);
        const LossCurve curve = train(model, corpus, train_flags.config(cfg.max_seq_len));
        std::ostringstream csv;
        write_loss_csv(csv, curve);
        write_text_output(train_curve, csv.str());
        if (!train_save.empty()) save_model(model, resolve_out(train_save));
        std::cerr << "final_loss=" << format_double(curve.losses.empty() ? 0.0 : curve.losses.back())
                  << "\n";
        return 0;
    }

    if (compare_cmd->parsed()) {
        const ModelConfig cfg = compare_model.config();
        const DonorCheckpoint donor = load_donor(resolve_out(compare_donor));
        const Corpus corpus = make_toy_corpus(compare_flags.seed ^ 0x636f7270ull,
                                              compare_flags.corpus_size, cfg.max_seq_len,
                                              cfg.vocab_size);
        const ExtendMode mode = compare_extend == "scaled-random" ? ExtendMode::ScaledRandom
                                                                  : ExtendMode::ScaledDonor;
        const ConvergenceComparison comparison = convergence_compare(
            cfg, corpus, compare_flags.config(cfg.max_seq_len), donor, compare_flags.seed, mode);
        std::ostringstream csv;
        write_compare_csv(csv, comparison);
        write_text_output(compare_out, csv.str());
        std::cerr << "threshold=" << format_double(comparison.threshold) << "\n"
                  << "scratch_cross_step=" << comparison.scratch_cross_step << "\n"
                  << "donor_cross_step=" << comparison.donor_cross_step << "\n";
        return 0;
    }

    if (sweep_cmd->parsed()) {
        if (sweep_scalar == sweep_transformer)
            throw Error("sweep needs exactly one of --scalar / --transformer");
        const std::vector<int> depths = parse_depths(sweep_depths);
        std::vector<Scheme> schemes;
        if (sweep_scheme == "both")
            schemes = {Scheme::Scaled, Scheme::Unit};
        else if (sweep_scheme == "unit")
            schemes = {Scheme::Unit};
        else
            schemes = {Scheme::Scaled};

        SweepResult all;
        for (Scheme scheme : schemes) {
            SweepResult part;
            if (sweep_scalar) {
                part = depth_sweep(depths, scheme, sweep_eta, sweep_central);
            } else {
                std::vector<ModelConfig> configs;
                for (int depth : depths) configs.push_back(sweep_model_config(depth));
                part = transformer_depth_sweep(configs, scheme, sweep_eta, sweep_seed);
            }
            for (SweepRecord& record : part.records) all.records.push_back(std::move(record));
        }
        std::ostringstream csv;
        write_sweep_csv(csv, all);
        write_text_output(sweep_out, csv.str());
        return 0;
    }

    if (ablate_cmd->parsed()) {
        const ModelConfig cfg = ablate_model.config();
        ToyTransformer model = scaled_xavier_init(cfg, ablate_flags.seed);
        const Corpus corpus = make_toy_corpus(ablate_flags.seed ^ 0x636f7270ull,
                                              ablate_flags.corpus_size, cfg.max_seq_len,
                                              cfg.vocab_size);
        const LossCurve curve = train(model, corpus, ablate_flags.config(cfg.max_seq_len));
        const ParamBreakdown breakdown = model_param_breakdown(model);
        std::cout << "use_adapters=" << (cfg.use_adapters ? 1 : 0) << "\n"
                  << "use_sharing=" << (cfg.use_sharing ? 1 : 0) << "\n"
                  << "final_loss=" << format_double(curve.losses.empty() ? 0.0 : curve.losses.back())
                  << "\n"
                  << "model_params="
                  << (cfg.use_sharing ? breakdown.shared_central_total : breakdown.unshared_total)
                  << "\n";
        return 0;
    }

    return 2;
}

}  // namespace

int cli_dispatch(const std::vector<std::string>& args) {
    try {
        return run(args);
    } catch (const CLI::ParseError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

}  // namespace mpo

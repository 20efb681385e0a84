// Command-line front end: policy training, federated runs, and metric
// extraction for plotting.
//
// Exit codes: 0 success, 1 configuration error, 2 runtime failure.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "fedsim/pipeline.hpp"

namespace fs = std::filesystem;
using namespace fedsim;

namespace {

void apply_env_overrides(ExperimentConfig& cfg) {
    if (const char* dir = std::getenv("FEDSIM_OUTPUT_DIR"); dir && *dir)
        cfg.output_dir = dir;
    if (const char* th = std::getenv("FEDSIM_THREADS"); th && *th) {
        const int n = std::atoi(th);
        if (n < 1) throw ConfigError("FEDSIM_THREADS must be a positive integer");
        Eigen::setNbThreads(n);
    }
}

// Creates the run directory, refusing to touch an existing one, and snapshots
// the config file into it.
fs::path make_run_dir(const ExperimentConfig& cfg,
                      const std::string& config_path) {
    if (cfg.run_id.empty()) throw ConfigError("run_id is required");
    const fs::path dir = fs::path(cfg.output_dir) / cfg.run_id;
    if (fs::exists(dir))
        throw ConfigError("run directory already exists: " + dir.string());
    fs::create_directories(dir);
    fs::copy_file(config_path, dir / "config.txt");
    return dir;
}

int cmd_run(const std::string& config_path) {
    ExperimentConfig cfg = parse_config(config_path);
    apply_env_overrides(cfg);
    const fs::path dir = make_run_dir(cfg, config_path);

    ExperimentSetup setup = make_setup(cfg);
    LoadedPolicies policies;
    const LoadedPolicies* pp = nullptr;
    if (cfg.attack_kind == AttackKind::dwba_rl) {
        policies = load_policies(cfg.attack_policy_dir);
        pp = &policies;
    }

    std::ofstream csv(dir / "metrics.csv");
    if (!csv) throw std::runtime_error("cannot write metrics.csv");
    RunOutput out = run_experiment(cfg, setup, csv, pp);
    csv.close();
    save_params(out.final_model, (dir / "model.fgnn").string());

    const auto& last = out.metrics.back();
    std::cout << "run " << cfg.run_id << " finished: main_acc="
              << last.main_acc << " backdoor_acc=" << last.backdoor_acc
              << " (" << dir.string() << ")\n";
    return 0;
}

int cmd_train_policy(const std::string& config_path) {
    ExperimentConfig cfg = parse_config(config_path);
    apply_env_overrides(cfg);
    const fs::path dir = make_run_dir(cfg, config_path);
    const fs::path ckpt = dir / "checkpoints";

    ExperimentSetup setup = make_setup(cfg);
    std::ofstream curve(dir / "training.csv");
    if (!curve) throw std::runtime_error("cannot write training.csv");
    train_policies(cfg, setup, ckpt.string(), &curve);

    std::cout << "policies written to " << ckpt.string() << "\n";
    return 0;
}

int cmd_plotdata(const std::string& metric, const std::string& output_dir,
                 const std::vector<std::string>& run_ids) {
    static const std::vector<std::string> cols = {
        "round", "main_acc", "backdoor_acc", "reward", "global_norm"};
    std::size_t col = 0;
    for (; col < cols.size(); ++col)
        if (cols[col] == metric) break;
    if (col == 0 || col == cols.size())
        throw ConfigError("metric must be one of main_acc, backdoor_acc, "
                          "reward, global_norm");

    std::string base = output_dir;
    if (const char* dir = std::getenv("FEDSIM_OUTPUT_DIR"); dir && *dir)
        base = dir;

    std::vector<std::vector<std::string>> series;
    std::size_t max_rows = 0;
    for (const auto& id : run_ids) {
        const fs::path p = fs::path(base) / id / "metrics.csv";
        std::ifstream is(p);
        if (!is) throw ConfigError("no metrics for run: " + p.string());
        std::string line;
        std::getline(is, line);  // header
        std::vector<std::string> vals;
        while (std::getline(is, line)) {
            std::stringstream ss(line);
            std::string tok;
            for (std::size_t c = 0; std::getline(ss, tok, ','); ++c)
                if (c == col) vals.push_back(tok);
        }
        max_rows = std::max(max_rows, vals.size());
        series.push_back(std::move(vals));
    }

    std::cout << "round";
    for (const auto& id : run_ids) std::cout << ',' << id;
    std::cout << '\n';
    for (std::size_t r = 0; r < max_rows; ++r) {
        std::cout << r;
        for (const auto& s : series)
            std::cout << ',' << (r < s.size() ? s[r] : "");
        std::cout << '\n';
    }
    return 0;
}

int cmd_convert_idx(const std::string& images, const std::string& labels,
                    const std::string& out) {
    save_dataset(load_idx(images, labels), out);
    std::cout << "wrote " << out << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Federated-learning backdoor simulator"};
    app.require_subcommand(1);

    std::string config_path;
    auto* train = app.add_subcommand("train-policy",
                                     "Train attack policies in the simulator");
    train->add_option("config", config_path, "experiment config file")
        ->required();

    std::string run_config;
    auto* run = app.add_subcommand("run", "Execute a federated training run");
    run->add_option("config", run_config, "experiment config file")->required();

    std::string metric, plot_dir = "runs";
    std::vector<std::string> run_ids;
    auto* plot = app.add_subcommand("plotdata",
                                    "Merge one metric across runs as CSV");
    plot->add_option("metric", metric,
                     "main_acc | backdoor_acc | reward | global_norm")
        ->required();
    plot->add_option("run_ids", run_ids, "run identifiers")->required();
    plot->add_option("--output-dir", plot_dir, "runs directory");

    std::string idx_images, idx_labels, idx_out;
    auto* conv = app.add_subcommand("convert-idx",
                                    "Convert IDX image/label files");
    conv->add_option("images", idx_images)->required();
    conv->add_option("labels", idx_labels)->required();
    conv->add_option("output", idx_out)->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (train->parsed()) return cmd_train_policy(config_path);
        if (run->parsed()) return cmd_run(run_config);
        if (plot->parsed()) return cmd_plotdata(metric, plot_dir, run_ids);
        if (conv->parsed()) return cmd_convert_idx(idx_images, idx_labels,
                                                   idx_out);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}

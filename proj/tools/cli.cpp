#include "hybridsel/cli.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "hybridsel/analysis.hpp"
#include "hybridsel/error.hpp"
#include "hybridsel/hash.hpp"
#include "hybridsel/parallel.hpp"

namespace hybridsel {

namespace fs = std::filesystem;

namespace {

const char* kModelManifest = "model.json";
const char* kModelBlob = "model.bin";
const char* kCalibration = "calibration.json";

std::string read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw ConfigError("cannot read " + p.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file(const fs::path& p, const std::string& bytes) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + p.string());
    out << bytes;
    if (!out) throw std::runtime_error("write failed for " + p.string());
}

std::string dump(const nlohmann::json& doc) { return doc.dump(2) + "\n"; }

std::string rho_tag(double rho) {
    std::ostringstream ss;
    ss << rho;
    return ss.str();
}

struct Artifacts {
    ToyModel model;
    CalibrationSet calibration;
};

Artifacts load_artifacts(const fs::path& dir) {
    const auto manifest = nlohmann::json::parse(read_file(dir / kModelManifest));
    const std::string blob = read_file(dir / kModelBlob);
    std::vector<std::uint8_t> bytes(blob.begin(), blob.end());
    ToyModel model = model_from_artifacts(manifest, bytes);
    CalibrationSet cal = calibration_from_json(nlohmann::json::parse(read_file(dir / kCalibration)));
    return {std::move(model), std::move(cal)};
}

CalibrationSet eval_set(const RunConfig& cfg) {
    NiahSpec spec = cfg.niah;
    spec.seed = derive_seed(cfg.seed, "eval");
    return generate(spec, cfg.eval_examples);
}

int cmd_gen(const RunConfig& cfg) {
    const fs::path dir(cfg.out);
    fs::create_directories(dir);
    const ToyModel model = build_planted_model(cfg.spec, cfg.circuit, cfg.seed);
    NiahSpec niah = cfg.niah;
    niah.seed = derive_seed(cfg.seed, "calibration");
    const CalibrationSet cal = generate(niah, cfg.calibration_examples);

    const auto blob = weights_to_blob(model);
    const std::string manifest = dump(model_manifest(model));
    const std::string calib = dump(calibration_to_json(cal));
    write_file(dir / kModelBlob, std::string(blob.begin(), blob.end()));
    write_file(dir / kModelManifest, manifest);
    write_file(dir / kCalibration, calib);
    std::cout << "model.bin " << sha256_hex(blob) << "\n"
              << "model.json " << sha256_hex(manifest) << "\n"
              << "calibration.json " << sha256_hex(calib) << "\n";
    return 0;
}

int cmd_search(const RunConfig& cfg) {
    const fs::path dir(cfg.out);
    const Artifacts art = load_artifacts(dir);
    const auto& model = art.model;
    const auto shape = model.spec().mask_shape();
    const std::string hash = spec_hash(model.spec());
    const std::string stem = cfg.method + "_rho" + rho_tag(cfg.bosch.rho);

    HybridPlan plan;
    std::ostringstream ledger;
    const bool searched = cfg.method == "bosch" || cfg.method == "b-single" || cfg.method == "b-multi" ||
                          cfg.method == "b-layer";
    if (searched) {
        Scorer scorer(model, art.calibration, cfg.bosch.window);
        auto oracle = make_search_oracle(scorer, cfg.bosch);
        if (cfg.method == "bosch") plan = bosch(*oracle, shape, cfg.bosch);
        if (cfg.method == "b-single") plan = ablation_single(*oracle, shape, cfg.bosch);
        if (cfg.method == "b-multi") plan = ablation_multi(*oracle, shape, cfg.bosch, cfg.layers_per_group);
        if (cfg.method == "b-layer") plan = ablation_layer(*oracle, shape, cfg.bosch);
        const auto& a = oracle->params().anchors;
        plan.metadata["anchors"] = {{"a", a.a}, {"b", a.b}};
        oracle->write_ledger_csv(ledger);
    } else if (cfg.method == "rand" || cfg.method == "bme" || cfg.method == "intr") {
        const auto kind = cfg.method == "rand" ? LayerHeuristic::Rand
                          : cfg.method == "bme" ? LayerHeuristic::Bme
                                                : LayerHeuristic::Intr;
        plan = heuristic(kind, shape, cfg.bosch.rho, derive_seed(cfg.seed, "rand"));
        Oracle(nullptr, LossParams{}).write_ledger_csv(ledger);
    } else {
        const BaselineMethod m = method_from_name(cfg.method);
        const HeadScoreTable table = run_baseline(m, model, art.calibration, cfg.baseline);
        std::ostringstream csv;
        write_score_csv(table, shape, csv);
        write_file(dir / ("scores_" + cfg.method + ".csv"), csv.str());
        plan.method = cfg.method;
        plan.final_mask = select_mask(table, cfg.bosch.rho, shape);
        plan.target_ratio = cfg.bosch.rho;
        plan.achieved_ratio = ratio(plan.final_mask);
        Oracle(nullptr, LossParams{}).write_ledger_csv(ledger);
    }
    plan.metadata["seed"] = cfg.seed;
    plan.metadata["window"] = cfg.bosch.window;
    const std::string plan_text = dump(plan_to_json(plan, hash));
    write_file(dir / ("plan_" + stem + ".json"), plan_text);
    write_file(dir / ("ledger_" + stem + ".csv"), ledger.str());
    std::cout << "plan_" << stem << ".json " << sha256_hex(plan_text) << "\n";
    return 0;
}

std::vector<HybridPlan> load_plans(const std::vector<std::string>& files, std::vector<std::string>* hashes) {
    std::vector<HybridPlan> plans;
    for (const auto& f : files) {
        const auto doc = nlohmann::json::parse(read_file(f));
        plans.push_back(plan_from_json(doc));
        if (hashes) hashes->push_back(doc.value("model_spec_hash", std::string()));
    }
    if (plans.empty()) throw ConfigError("no plan files given");
    for (const auto& p : plans) {
        if (!(p.final_mask.shape() == plans.front().final_mask.shape())) {
            throw ConfigError("plan files describe different model shapes");
        }
    }
    return plans;
}

int cmd_eval(const RunConfig& cfg, const std::vector<std::string>& files) {
    const fs::path dir(cfg.out);
    const Artifacts art = load_artifacts(dir);
    std::vector<std::string> hashes;
    const auto plans = load_plans(files, &hashes);
    const std::string hash = spec_hash(art.model.spec());
    for (const auto& h : hashes) {
        if (h != hash) throw ConfigError("plan was produced for a different model (spec hash " + h + ")");
    }
    const CalibrationSet held_out = eval_set(cfg);
    Scorer scorer(art.model, held_out, cfg.bosch.window);
    const auto shape = art.model.spec().mask_shape();
    const double s_full = scorer.score(HeadMask::all_full(shape));
    const double s_swa = scorer.score(HeadMask::all_swa(shape));
    const Anchors anchors{s_swa, (1.0 + cfg.bosch.gamma) * s_full};
    std::ostringstream csv;
    csv << "plan,method,target_ratio,ratio,raw_score,normalized_score\n" << std::setprecision(17);
    for (std::size_t i = 0; i < plans.size(); ++i) {
        const double s = scorer.score(plans[i].final_mask);
        const double norm = anchors.b > anchors.a ? normalized_score(s, anchors) : 0.0;
        csv << fs::path(files[i]).filename().string() << ',' << plans[i].method << ',' << plans[i].target_ratio << ','
            << ratio(plans[i].final_mask) << ',' << s << ',' << norm << '\n';
    }
    write_file(dir / "eval.csv", csv.str());
    std::cout << "eval.csv " << sha256_hex(csv.str()) << "\n";
    return 0;
}

int cmd_analyze(const RunConfig& cfg, const std::vector<std::string>& files) {
    const fs::path dir(cfg.out);
    fs::create_directories(dir);
    const auto plans = load_plans(files, nullptr);
    std::vector<SelectionSet> sets;
    for (std::size_t i = 0; i < plans.size(); ++i) {
        sets.push_back(SelectionSet::from_mask(plans[i].method, plans[i].target_ratio, plans[i].final_mask));
    }
    std::vector<SelectionSet> labelled = sets;
    for (std::size_t i = 0; i < labelled.size(); ++i) labelled[i].method += "@" + rho_tag(labelled[i].rho);
    std::ostringstream dist, turn;
    write_distance_csv(distance_matrix(labelled), dist);
    write_turnover_csv(adjacent_turnover(sets), turn);
    write_file(dir / "distance.csv", dist.str());
    write_file(dir / "turnover.csv", turn.str());
    std::cout << "distance.csv " << sha256_hex(dist.str()) << "\n"
              << "turnover.csv " << sha256_hex(turn.str()) << "\n";
    return 0;
}

}  // namespace

const std::vector<std::string>& known_methods() {
    static const std::vector<std::string> m{"bosch", "b-single", "b-multi", "b-layer", "rand", "bme", "intr",
                                            "dcam",  "apl",      "proxy",   "qada",    "razor", "fisher"};
    return m;
}

void RunConfig::validate() const {
    spec.validate();
    circuit.validate(spec);
    niah.validate();
    bosch.validate();
    if (calibration_examples < 1 || eval_examples < 1) throw ConfigError("example counts must be positive");
    if (std::find(known_methods().begin(), known_methods().end(), method) == known_methods().end()) {
        throw ConfigError("unknown method '" + method + "'");
    }
    if (layers_per_group < 1) throw ConfigError("layers_per_group must be >= 1");
    if (threads < 1) throw ConfigError("threads must be >= 1");
    if (niah.seq_len > spec.max_seq_len) throw ConfigError("niah seq_len exceeds the model's max_seq_len");
    const int top = std::max({niah.marker_token, *std::max_element(niah.filler_tokens.begin(), niah.filler_tokens.end()),
                              *std::max_element(niah.key_tokens.begin(), niah.key_tokens.end()),
                              *std::max_element(niah.value_tokens.begin(), niah.value_tokens.end())});
    if (top >= spec.vocab_size) throw ConfigError("niah token ids exceed the model vocabulary");
}

RunConfig config_from_json(const nlohmann::json& doc) {
    RunConfig c;
    if (!doc.is_object()) throw ConfigError("config must be a JSON object");
    if (doc.contains("model")) {
        const auto& m = doc.at("model");
        if (m.contains("spec")) c.spec = spec_from_json(m.at("spec"));
        if (m.contains("circuit")) {
            const auto& cj = m.at("circuit");
            c.circuit = cj.is_string() ? (cj.get<std::string>() == "standard"
                                              ? standard_toy_circuit()
                                              : throw ConfigError("unknown circuit preset " + cj.dump()))
                                       : circuit_from_json(cj);
        }
    }
    if (doc.contains("calibration")) {
        const auto& cal = doc.at("calibration");
        if (cal.contains("niah")) c.niah = niah_spec_from_json(cal.at("niah"));
        c.calibration_examples = cal.value("examples", c.calibration_examples);
        c.eval_examples = cal.value("eval_examples", c.eval_examples);
    }
    c.method = doc.value("method", c.method);
    c.seed = doc.value("seed", c.seed);
    c.threads = doc.value("threads", c.threads);
    c.out = doc.value("out", c.out);
    if (doc.contains("search")) {
        const auto& s = doc.at("search");
        auto& b = c.bosch;
        b.rho = s.value("rho", b.rho);
        b.window = s.value("window", b.window);
        b.kappa = s.value("kappa", b.kappa);
        b.buckets = s.value("buckets", b.buckets);
        b.p_low = s.value("p_low", b.p_low);
        b.p_high = s.value("p_high", b.p_high);
        b.alpha = s.value("alpha", b.alpha);
        b.gamma = s.value("gamma", b.gamma);
        b.max_vars = s.value("max_vars", b.max_vars);
        c.layers_per_group = s.value("layers_per_group", c.layers_per_group);
    }
    if (doc.contains("baseline")) {
        const auto& s = doc.at("baseline");
        auto& b = c.baseline;
        b.proxy_block = s.value("proxy_block", b.proxy_block);
        b.proxy_mass = s.value("proxy_mass", b.proxy_mass);
        b.proxy_head = s.value("proxy_head", b.proxy_head);
        b.qada_buffer = s.value("qada_buffer", b.qada_buffer);
        b.razor_block = s.value("razor_block", b.razor_block);
        b.razor_standard_induction = s.value("razor_standard_induction", b.razor_standard_induction);
    }
    return c;
}

nlohmann::json config_to_json(const RunConfig& c) {
    return {{"model", {{"spec", spec_to_json(c.spec)}, {"circuit", circuit_to_json(c.circuit)}}},
            {"calibration",
             {{"niah", niah_spec_to_json(c.niah)}, {"examples", c.calibration_examples}, {"eval_examples", c.eval_examples}}},
            {"method", c.method},
            {"seed", c.seed},
            {"threads", c.threads},
            {"out", c.out},
            {"search",
             {{"rho", c.bosch.rho},
              {"window", c.bosch.window},
              {"kappa", c.bosch.kappa},
              {"buckets", c.bosch.buckets},
              {"p_low", c.bosch.p_low},
              {"p_high", c.bosch.p_high},
              {"alpha", c.bosch.alpha},
              {"gamma", c.bosch.gamma},
              {"max_vars", c.bosch.max_vars},
              {"layers_per_group", c.layers_per_group}}},
            {"baseline",
             {{"proxy_block", c.baseline.proxy_block},
              {"proxy_mass", c.baseline.proxy_mass},
              {"proxy_head", c.baseline.proxy_head},
              {"qada_buffer", c.baseline.qada_buffer},
              {"razor_block", c.baseline.razor_block},
              {"razor_standard_induction", c.baseline.razor_standard_induction}}}};
}

int run_cli(int argc, char** argv) {
    CLI::App app{"Pick attention heads to convert to sliding-window attention"};
    app.require_subcommand(1);
    std::string config_path, method, out;
    std::optional<double> rho;
    std::optional<int> window, threads;
    std::optional<std::uint64_t> seed;
    std::vector<std::string> plan_files;
    auto common = [&](CLI::App* sub) {
        sub->add_option("--config", config_path, "JSON config file");
        sub->add_option("--method", method, "selection method");
        sub->add_option("--rho", rho, "target SWA ratio");
        sub->add_option("--window", window, "sliding window size");
        sub->add_option("--seed", seed, "run seed");
        sub->add_option("--threads", threads, "worker threads (results do not depend on it)");
        sub->add_option("--out", out, "output directory (default $HYBRIDSEL_OUT or ./hybridsel_out)");
    };
    auto* gen = app.add_subcommand("gen", "build the model and calibration set");
    auto* search = app.add_subcommand("search", "run a selection method");
    auto* eval = app.add_subcommand("eval", "score plans on a held-out set");
    auto* analyze = app.add_subcommand("analyze", "compare plans");
    for (auto* s : {gen, search, eval, analyze}) common(s);
    eval->add_option("plans", plan_files, "plan files")->required();
    analyze->add_option("plans", plan_files, "plan files")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    RunConfig cfg;
    try {
        if (!config_path.empty()) cfg = config_from_json(nlohmann::json::parse(read_file(config_path)));
        if (!method.empty()) cfg.method = method;
        if (rho) cfg.bosch.rho = *rho;
        if (window) cfg.bosch.window = *window;
        if (seed) cfg.seed = *seed;
        if (threads) cfg.threads = *threads;
        if (!out.empty()) cfg.out = out;
        if (cfg.out.empty()) {
            const char* env = std::getenv("HYBRIDSEL_OUT");
            cfg.out = env && *env ? env : "hybridsel_out";
        }
        cfg.bosch.seed = cfg.seed;
        cfg.baseline.seed = derive_seed(cfg.seed, "baseline");
        cfg.baseline.window = cfg.bosch.window;
        cfg.validate();
    } catch (const std::exception& e) {
        std::cerr << "hybridsel: configuration error: " << e.what() << "\n";
        return 2;
    }
    set_num_threads(cfg.threads);

    try {
        if (*gen) return cmd_gen(cfg);
        if (*search) return cmd_search(cfg);
        if (*eval) return cmd_eval(cfg, plan_files);
        return cmd_analyze(cfg, plan_files);
    } catch (const ConfigError& e) {
        std::cerr << "hybridsel: " << e.what() << "\n";
        return 2;
    } catch (const nlohmann::json::exception& e) {
        std::cerr << "hybridsel: malformed input: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "hybridsel: " << (*search ? cfg.method + ": " : std::string()) << e.what() << "\n";
        return 3;
    }
}

}  // namespace hybridsel

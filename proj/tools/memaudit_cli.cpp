// memaudit - training-data memorization audit toolkit.
//
// Subcommands wire the library stages into reproducible runs: index builds
// the corpus search structure, train fits the toy LM, attack runs a prompt
// attack end to end and writes reports, sft fine-tunes on (mis)matched
// Q/A data, profile exports entropy traces. One root seed drives every
// random choice; a run manifest records inputs, outputs and the seed.

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "memaudit/attacks.hpp"
#include "memaudit/corpus_index.hpp"
#include "memaudit/evaluator.hpp"
#include "memaudit/lm_ops.hpp"
#include "memaudit/synthetic.hpp"
#include "memaudit/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace memaudit;

namespace {

constexpr const char* kVersion = "memaudit 0.1.0";

struct GlobalOpts {
    std::string config_path;
    std::string out_dir;
    std::uint64_t seed = 0;
    bool seed_set = false;
    int threads = 0;
};

json load_config(const std::string& path) {
    if (path.empty()) return json::object();
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config file " + path);
    json cfg;
    in >> cfg;
    return cfg;
}

template <typename T>
T get_or(const json& obj, const char* key, T fallback) {
    if (obj.contains(key)) return obj.at(key).get<T>();
    return fallback;
}

ModelConfig model_config_from(const json& cfg) {
    ModelConfig mc;
    if (!cfg.contains("model")) return mc;
    const json& m = cfg.at("model");
    mc.n_layers = get_or(m, "n_layers", mc.n_layers);
    mc.d_model = get_or(m, "d_model", mc.d_model);
    mc.n_heads = get_or(m, "n_heads", mc.n_heads);
    mc.context_len = get_or(m, "context_len", mc.context_len);
    mc.init_std = get_or(m, "init_std", mc.init_std);
    mc.rms_eps = get_or(m, "rms_eps", mc.rms_eps);
    mc.zero_init_head = get_or(m, "zero_init_head", mc.zero_init_head);
    return mc;
}

TrainConfig train_config_from(const json& cfg, std::uint64_t seed) {
    TrainConfig tc;
    tc.seed = seed;
    if (!cfg.contains("train")) return tc;
    const json& t = cfg.at("train");
    tc.epochs = get_or(t, "epochs", tc.epochs);
    tc.batch_size = get_or(t, "batch_size", tc.batch_size);
    tc.seq_len = get_or(t, "seq_len", tc.seq_len);
    tc.learning_rate = get_or(t, "learning_rate", tc.learning_rate);
    tc.beta1 = get_or(t, "beta1", tc.beta1);
    tc.beta2 = get_or(t, "beta2", tc.beta2);
    tc.adam_eps = get_or(t, "adam_eps", tc.adam_eps);
    tc.grad_clip = get_or(t, "grad_clip", tc.grad_clip);
    tc.shuffle = get_or(t, "shuffle", tc.shuffle);
    return tc;
}

DecodeConfig decode_config_from(const json& cfg) {
    DecodeConfig dc;
    if (!cfg.contains("decode")) return dc;
    const json& d = cfg.at("decode");
    dc.temperature = get_or(d, "temperature", dc.temperature);
    dc.max_new_tokens = get_or(d, "max_new_tokens", dc.max_new_tokens);
    dc.min_new_tokens = get_or(d, "min_new_tokens", dc.min_new_tokens);
    dc.stop_at_eos = get_or(d, "stop_at_eos", dc.stop_at_eos);
    return dc;
}

MatchConfig match_config_from(const json& cfg) {
    MatchConfig mc;
    if (!cfg.contains("match")) return mc;
    const json& m = cfg.at("match");
    mc.window = get_or(m, "window", mc.window);
    mc.tolerances = get_or(m, "tolerances", mc.tolerances);
    mc.diversity_threshold = get_or(m, "diversity_threshold", mc.diversity_threshold);
    return mc;
}

RetrievalConfig retrieval_config_from(const json& cfg) {
    RetrievalConfig rc;
    if (!cfg.contains("retrieval")) return rc;
    const json& r = cfg.at("retrieval");
    rc.shingle_length = get_or(r, "shingle_length", rc.shingle_length);
    rc.shingle_stride = get_or(r, "shingle_stride", rc.shingle_stride);
    rc.max_candidates = get_or(r, "max_candidates", rc.max_candidates);
    rc.pre_filter_diversity_threshold =
        get_or(r, "pre_filter_diversity_threshold", rc.pre_filter_diversity_threshold);
    return rc;
}

AttackParams attack_params_from(const json& cfg, const std::string& name) {
    AttackParams ap;
    ap.kind = parse_attack_name(name);
    if (!cfg.contains("attack")) return ap;
    const json& a = cfg.at("attack");
    ap.ra_repeat_hint = get_or(a, "ra_repeat_hint", ap.ra_repeat_hint);
    ap.ea_n = get_or(a, "ea_n", ap.ea_n);
    ap.rwa_span_len = get_or(a, "rwa_span_len", ap.rwa_span_len);
    ap.rsa_length = get_or(a, "rsa_length", ap.rsa_length);
    if (a.contains("cia")) {
        const json& c = a.at("cia");
        ap.cia.steps = get_or(c, "steps", ap.cia.steps);
        ap.cia.top_k = get_or(c, "top_k", ap.cia.top_k);
        ap.cia.candidates_per_step =
            get_or(c, "candidates_per_step", ap.cia.candidates_per_step);
        ap.cia.init_length = get_or(c, "init_length", ap.cia.init_length);
        const std::string objective = get_or<std::string>(c, "objective", "average");
        if (objective == "average" || objective == "average_snippet_entropy") {
            ap.cia.objective = EntropyObjective::average_snippet_entropy;
        } else if (objective == "last_token" || objective == "last_token_entropy") {
            ap.cia.objective = EntropyObjective::last_token_entropy;
        } else {
            throw std::runtime_error("unknown cia objective '" + objective + "'");
        }
        const std::string proposal = get_or<std::string>(c, "proposal", "gradient");
        if (proposal == "gradient" || proposal == "gradient_guided") {
            ap.cia.proposal = ProposalMode::gradient_guided;
        } else if (proposal == "sampled") {
            ap.cia.proposal = ProposalMode::sampled;
        } else {
            throw std::runtime_error("unknown cia proposal mode '" + proposal + "'");
        }
    }
    return ap;
}

// Manifest: bookkeeping for reproducibility; timestamps live here and only
// here so every other artifact is byte-stable.
class Manifest {
public:
    Manifest(const GlobalOpts& opts, const std::string& command) : opts_(opts) {
        body_["tool_version"] = kVersion;
        body_["command"] = command;
        body_["config_file"] = opts.config_path;
        body_["seed"] = opts.seed;
        body_["threads"] = ThreadPool::max_threads();
        body_["started_at"] = now();
        body_["inputs"] = json::array();
        body_["outputs"] = json::array();
    }

    void input(const std::string& path) { body_["inputs"].push_back(path); }
    void output(const std::string& path) { body_["outputs"].push_back(path); }

    void finish() {
        body_["finished_at"] = now();
        for (const auto& out : body_["outputs"]) {
            if (!fs::exists(out.get<std::string>())) {
                throw std::runtime_error("declared output missing: " +
                                         out.get<std::string>());
            }
        }
        const fs::path dir =
            opts_.out_dir.empty() ? fs::path(".") : fs::path(opts_.out_dir);
        fs::create_directories(dir);
        std::ofstream out(dir / "run_manifest.json", std::ios::trunc);
        out << body_.dump(2) << "\n";
    }

private:
    static std::string now() {
        const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
        char buf[32];
        std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
        return buf;
    }

    GlobalOpts opts_;
    json body_;
};

void write_loss_csv(const TrainReport& report, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + path);
    out << "epoch,loss\n";
    char buf[64];
    for (std::size_t e = 0; e < report.epoch_losses.size(); ++e) {
        std::snprintf(buf, sizeof(buf), "%zu,%.12g\n", e + 1, report.epoch_losses[e]);
        out << buf;
    }
}

// ----------------------------- subcommands -----------------------------

int cmd_index(const GlobalOpts& opts, const std::string& corpus_path,
              const std::string& out_path) {
    Manifest manifest(opts, "index");
    manifest.input(corpus_path);
    const Vocabulary vocab = Vocabulary::byte_level();
    auto docs = load_corpus_jsonl(corpus_path, vocab);
    if (docs.empty()) {
        throw std::runtime_error("corpus is empty: " + corpus_path);
    }
    SuffixIndex index = SuffixIndex::build(docs, vocab);
    index.save(out_path);
    manifest.output(out_path);
    std::cout << "indexed " << index.doc_count() << " documents, "
              << index.token_count() << " tokens -> " << out_path << "\n";
    manifest.finish();
    return 0;
}

int cmd_train(const GlobalOpts& opts, const json& cfg, const std::string& corpus_path,
              const std::string& model_out, const std::string& loss_csv) {
    Manifest manifest(opts, "train");
    manifest.input(corpus_path);
    const Vocabulary vocab = Vocabulary::byte_level();
    auto docs = load_corpus_jsonl(corpus_path, vocab);
    if (docs.empty()) {
        throw std::runtime_error("corpus is empty: " + corpus_path);
    }
    ToyLM model(model_config_from(cfg), vocab, derive_seed(opts.seed, 0x696e6974ull));
    TrainConfig tc = train_config_from(cfg, derive_seed(opts.seed, 0x747261696eull));
    TrainReport report = train_lm(model, docs, tc);
    model.save(model_out);
    manifest.output(model_out);
    if (!loss_csv.empty()) {
        write_loss_csv(report, loss_csv);
        manifest.output(loss_csv);
    }
    std::cout << "trained " << tc.epochs << " epoch(s) on " << docs.size()
              << " documents";
    if (!report.epoch_losses.empty()) {
        std::cout << ", final loss " << report.epoch_losses.back() << " nats/token";
    }
    std::cout << " -> " << model_out << "\n";
    manifest.finish();
    return 0;
}

int cmd_attack(const GlobalOpts& opts, const json& cfg, const std::string& model_path,
               const std::string& index_path, const std::string& attack,
               const std::string& report_out, const std::string& canary_manifest) {
    Manifest manifest(opts, "attack");
    manifest.input(model_path);
    manifest.input(index_path);
    ToyLM model = ToyLM::load(model_path);
    SuffixIndex index = SuffixIndex::load(index_path);

    ExperimentConfig ec;
    ec.attack = attack_params_from(cfg, attack);
    ec.decode = decode_config_from(cfg);
    ec.match = match_config_from(cfg);
    ec.retrieval = retrieval_config_from(cfg);
    ec.seed = derive_seed(opts.seed, 0x61747461636bull);
    if (cfg.contains("experiment")) {
        const json& e = cfg.at("experiment");
        ec.n_prompts = get_or(e, "n_prompts", ec.n_prompts);
        ec.rep_threshold = get_or(e, "rep_threshold", ec.rep_threshold);
        ec.precursor_window = get_or(e, "precursor_window", ec.precursor_window);
    }
    if (!canary_manifest.empty()) {
        manifest.input(canary_manifest);
        ec.canary_doc_ids = load_canary_manifest(canary_manifest);
    }

    MetricsReport report = run_attack_suite(model, index, ec);
    const fs::path base(report_out);
    const std::string stem = (base.parent_path() / base.stem()).string();
    const std::string sidecar = stem + ".jsonl";
    const std::string entropies = stem + "_entropies.csv";
    const std::string precursor_csv = stem + "_precursor.csv";
    save_metrics_report(report, report_out, sidecar);
    save_entropy_csv(report, entropies);
    PrecursorResult precursor = detail_eval::precursor_from_samples(
        report.samples, ec.precursor_window, 0);
    save_precursor_csv(precursor, precursor_csv);
    manifest.output(report_out);
    manifest.output(sidecar);
    manifest.output(entropies);
    manifest.output(precursor_csv);

    if (ec.attack.kind == AttackKind::cia && !report.samples.empty()) {
        // trace of the first sample's optimization, rerun deterministically
        const std::uint64_t sample_seed = derive_seed(ec.seed, 0x70726d70ull);
        CIAConfig cc = ec.attack.cia;
        cc.seed = derive_seed(sample_seed, 0x63696173ull);
        AttackSnippet init = rsa_snippet(model.vocab(), cc.init_length, sample_seed);
        auto [snippet, trace] = cia_optimize(model, init, cc);
        (void)snippet;
        const std::string trace_csv = stem + "_trace.csv";
        save_trace_csv(trace, trace_csv);
        manifest.output(trace_csv);
    }

    std::cout << "attack " << report.attack << " over " << report.n_prompts
              << " prompts: VM " << report.vm_rate << "%, M5 " << report.m5_rate
              << "%, M10 " << report.m10_rate << "%";
    if (!ec.canary_doc_ids.empty()) {
        std::cout << ", canary hits " << report.canary_hit_rate << "%";
    }
    std::cout << " -> " << report_out << "\n";
    manifest.finish();
    return 0;
}

int cmd_sft(const GlobalOpts& opts, const json& cfg, const std::string& model_path,
            const std::string& dataset_path, const std::string& mode,
            const std::string& model_out, const std::string& echo_out,
            const std::string& loss_csv) {
    if (mode != "mismatched" && mode != "benign") {
        throw std::runtime_error("sft mode must be 'mismatched' or 'benign', got '" +
                                 mode + "'");
    }
    Manifest manifest(opts, "sft");
    manifest.input(model_path);
    manifest.input(dataset_path);
    ToyLM model = ToyLM::load(model_path);
    auto qa = load_qa_jsonl(dataset_path);
    if (qa.empty()) {
        throw std::runtime_error("dataset is empty: " + dataset_path);
    }
    TrainConfig tc = train_config_from(cfg, derive_seed(opts.seed, 0x736674ull));

    int shift = 1, min_q = 10, min_a = 50;
    if (cfg.contains("sft")) {
        const json& s = cfg.at("sft");
        shift = get_or(s, "shift", shift);
        min_q = get_or(s, "min_q_chars", min_q);
        min_a = get_or(s, "min_a_chars", min_a);
    }

    TrainReport report;
    if (mode == "mismatched") {
        MismatchedDataset mis = build_mismatched_dataset(qa, shift, min_q, min_a);
        if (!echo_out.empty()) {
            save_mismatched_jsonl(mis, echo_out);
            manifest.output(echo_out);
        }
        report = mismatched_sft(model, mis, tc);
        std::cout << "mismatched sft on " << mis.pairs.size() << " shifted pairs";
    } else {
        const auto pairs =
            tokenize_qa_for_sft(qa, model.vocab(), model.config().context_len);
        if (!echo_out.empty()) {
            MismatchedDataset echo;
            for (std::size_t i = 0; i < qa.size(); ++i) {
                echo.pairs.push_back(MismatchedPair{qa[i].question, qa[i].answer,
                                                    static_cast<std::int64_t>(i),
                                                    static_cast<std::int64_t>(i)});
            }
            save_mismatched_jsonl(echo, echo_out);
            manifest.output(echo_out);
        }
        report = sft(model, pairs, tc);
        std::cout << "benign sft on " << pairs.size() << " pairs";
    }
    model.save(model_out);
    manifest.output(model_out);
    if (!loss_csv.empty()) {
        write_loss_csv(report, loss_csv);
        manifest.output(loss_csv);
    }
    if (!report.epoch_losses.empty()) {
        std::cout << ", final loss " << report.epoch_losses.back();
    }
    std::cout << " -> " << model_out << "\n";
    manifest.finish();
    return 0;
}

int cmd_profile(const GlobalOpts& opts, const std::string& model_path,
                const std::string& prompt_file, const std::string& out_prefix) {
    Manifest manifest(opts, "profile");
    manifest.input(model_path);
    manifest.input(prompt_file);
    ToyLM model = ToyLM::load(model_path);
    std::ifstream in(prompt_file);
    if (!in) throw std::runtime_error("cannot open prompt file " + prompt_file);
    std::string line;
    int count = 0;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const TokenSequence tokens = encode_text(line);
        EntropyProfile profile = entropy_profile(model, tokens);
        char name[32];
        std::snprintf(name, sizeof(name), "%03d.csv", count);
        const std::string path = out_prefix + name;
        save_entropy_profile_csv(profile, path);
        manifest.output(path);
        ++count;
    }
    if (count == 0) {
        throw std::runtime_error("prompt file has no prompts: " + prompt_file);
    }
    std::cout << "wrote " << count << " entropy profile(s) to " << out_prefix
              << "NNN.csv\n";
    manifest.finish();
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"memaudit: train, attack and audit a toy LM for memorization leakage"};
    app.set_version_flag("--version", kVersion);
    app.require_subcommand(1);
    app.fallthrough();  // global flags may follow the subcommand

    GlobalOpts opts;
    if (const char* env = std::getenv("MEMAUDIT_OUT_DIR")) opts.out_dir = env;
    app.add_option("--config", opts.config_path, "JSON config file");
    app.add_option("--out-dir", opts.out_dir, "directory for the run manifest");
    app.add_option("--seed", opts.seed, "root seed for every random choice");
    app.add_option("--threads", opts.threads, "worker thread cap (0 = hardware)");

    std::string corpus_path, out_path, model_path, index_path, attack_name_s;
    std::string report_out, canary_manifest, dataset_path, mode, model_out;
    std::string echo_out, loss_csv, prompt_file, out_prefix;

    auto* c_index = app.add_subcommand("index", "build a suffix index over a corpus");
    c_index->add_option("--corpus", corpus_path, "corpus JSONL")->required();
    c_index->add_option("--out", out_path, "index output path")->required();

    auto* c_train = app.add_subcommand("train", "train the toy LM on a corpus");
    c_train->add_option("--corpus", corpus_path, "corpus JSONL")->required();
    c_train->add_option("--model-out", model_out, "checkpoint output path")->required();
    c_train->add_option("--loss-csv", loss_csv, "per-epoch loss CSV");

    auto* c_attack = app.add_subcommand("attack", "run an attack suite against a model");
    c_attack->add_option("--model", model_path, "model checkpoint")->required();
    c_attack->add_option("--index", index_path, "suffix index file")->required();
    c_attack->add_option("--attack", attack_name_s, "attack name (ra|ea|rwa|rsa|cia)")
        ->required();
    c_attack->add_option("--report-out", report_out, "metrics report JSON path")
        ->required();
    c_attack->add_option("--canaries", canary_manifest, "canary manifest JSON");

    auto* c_sft = app.add_subcommand("sft", "supervised fine-tune on Q/A data");
    c_sft->add_option("--model", model_path, "model checkpoint")->required();
    c_sft->add_option("--dataset", dataset_path, "Q/A JSONL")->required();
    c_sft->add_option("--mode", mode, "mismatched|benign")->required();
    c_sft->add_option("--model-out", model_out, "checkpoint output path")->required();
    c_sft->add_option("--echo-dataset", echo_out, "echo the trained pairs as JSONL");
    c_sft->add_option("--loss-csv", loss_csv, "per-epoch loss CSV");

    auto* c_profile = app.add_subcommand("profile", "entropy profiles for prompts");
    c_profile->add_option("--model", model_path, "model checkpoint")->required();
    c_profile->add_option("--prompts", prompt_file, "one prompt per line")->required();
    c_profile->add_option("--out-prefix", out_prefix, "output CSV path prefix")
        ->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (opts.threads > 0) ThreadPool::set_max_threads(opts.threads);
        const json cfg = load_config(opts.config_path);
        if (cfg.contains("seed") && opts.seed == 0) {
            opts.seed = cfg.at("seed").get<std::uint64_t>();
        }
        if (c_index->parsed()) return cmd_index(opts, corpus_path, out_path);
        if (c_train->parsed()) return cmd_train(opts, cfg, corpus_path, model_out, loss_csv);
        if (c_attack->parsed()) {
            return cmd_attack(opts, cfg, model_path, index_path, attack_name_s,
                              report_out, canary_manifest);
        }
        if (c_sft->parsed()) {
            return cmd_sft(opts, cfg, model_path, dataset_path, mode, model_out,
                           echo_out, loss_csv);
        }
        if (c_profile->parsed()) {
            return cmd_profile(opts, model_path, prompt_file, out_prefix);
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 1;
}

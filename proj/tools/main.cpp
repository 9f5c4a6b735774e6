#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "ctxspeech/attention.hpp"
#include "ctxspeech/bench.hpp"
#include "ctxspeech/context.hpp"
#include "ctxspeech/errors.hpp"
#include "ctxspeech/pipeline.hpp"
#include "ctxspeech/rng.hpp"

namespace {

using namespace ctxspeech;

std::string read_text_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot open text file '" + path + "'");
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

std::uint64_t seed_default() {
    if (const char* env = std::getenv("CTXSPEECH_SEED")) {
        char* end = nullptr;
        const unsigned long long v = std::strtoull(env, &end, 10);
        if (end == env || *end != '\0')
            throw InputError("CTXSPEECH_SEED is not a number: '" + std::string(env) + "'");
        return static_cast<std::uint64_t>(v);
    }
    return 42;
}

LanguageMode parse_mode(const std::string& name) {
    if (name == "auto") return LanguageMode::Auto;
    if (name == "chinese") return LanguageMode::Chinese;
    if (name == "english") return LanguageMode::English;
    throw InputError("unknown language mode '" + name + "' (auto|chinese|english)");
}

nlohmann::json featurize_json(const ParagraphDocument& doc, const CorpusStats& stats) {
    const auto features = token_stats(doc, stats);
    nlohmann::json sentences = nlohmann::json::array();
    for (std::size_t s = 0; s < doc.sentences.size(); ++s) {
        nlohmann::json tokens = nlohmann::json::array();
        for (std::size_t k = 0; k < doc.sentences[s].tokens.size(); ++k) {
            const Token& tok = doc.sentences[s].tokens[k];
            tokens.push_back({{"text", tok.text},
                              {"phoneme_count", tok.phoneme_count},
                              {"f", features[s][k].f}});
        }
        sentences.push_back({{"text", doc.sentences[s].text}, {"tokens", std::move(tokens)}});
    }
    return {{"paragraph_id", doc.id},
            {"sentences", std::move(sentences)},
            {"corpus_stats",
             {{"max_tokens_per_sentence", stats.max_tokens_per_sentence},
              {"max_tokens_per_paragraph", stats.max_tokens_per_paragraph},
              {"max_sentences_per_paragraph", stats.max_sentences_per_paragraph}}}};
}

CorpusStats stats_from_json_file(const std::string& path) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_text_file(path));
    } catch (const nlohmann::json::exception& e) {
        throw InputError("stats file '" + path + "' is not valid JSON: " + e.what());
    }
    CorpusStats stats;
    try {
        if (j.contains("max_tokens_per_sentence"))
            stats.max_tokens_per_sentence = j["max_tokens_per_sentence"].get<std::uint64_t>();
        if (j.contains("max_tokens_per_paragraph"))
            stats.max_tokens_per_paragraph = j["max_tokens_per_paragraph"].get<std::uint64_t>();
        if (j.contains("max_sentences_per_paragraph"))
            stats.max_sentences_per_paragraph = j["max_sentences_per_paragraph"].get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw InputError("stats file '" + path + "' has wrong value types: " + e.what());
    }
    stats.validate();
    return stats;
}

int cmd_featurize(const std::string& text_path, const std::string& stats_path,
                  const std::string& out_path, const std::string& mode, const std::string& id) {
    ParagraphDocument doc = tokenize(read_text_file(text_path), parse_mode(mode), id);
    CorpusStats stats;
    if (!stats_path.empty()) {
        stats = stats_from_json_file(stats_path);
    } else {
        const ParagraphDocument* docs = &doc;
        stats = compute_corpus_stats({docs, 1});
    }
    const std::string payload = featurize_json(doc, stats).dump(2);
    if (out_path.empty()) {
        std::cout << payload << '\n';
    } else {
        std::ofstream out(out_path);
        if (!out) throw InputError("cannot open '" + out_path + "' for writing");
        out << payload << '\n';
    }
    return 0;
}

int cmd_forward(const std::string& text_path, const std::string& config_path,
                const std::string& out_dir, const std::string& mode, const std::string& id,
                const std::string& variant_override, bool no_memory, bool no_context,
                const std::string& embeddings_path, std::uint64_t seed, bool seed_given) {
    ModelConfig config;
    if (!config_path.empty()) config = model_config_from_json_text(read_text_file(config_path));
    if (seed_given || config_path.empty()) config.seed = seed;
    if (!variant_override.empty()) {
        auto v = variant_from_name(variant_override);
        if (!v) throw InputError("unknown attention variant '" + variant_override + "'");
        config.variant = *v;
    }
    if (no_memory) config.memory_recurrence = false;
    if (no_context) config.contextual_encoder = false;
    config.validate();

    ParagraphDocument doc = tokenize(read_text_file(text_path), parse_mode(mode), id);

    std::unique_ptr<EmbeddingProvider> provider;
    if (embeddings_path.empty())
        provider = std::make_unique<HashEmbeddingProvider>(mix_seed(config.seed, fnv1a64("embeddings")));
    else
        provider = std::make_unique<ImportedEmbeddingProvider>(
            ImportedEmbeddingProvider::from_file(embeddings_path));

    const Model model = build_model(config);
    const SynthesisResult result = synthesize_paragraph(model, doc, *provider);

    std::filesystem::create_directories(out_dir);
    const std::string mel_path = (std::filesystem::path(out_dir) / "mel.ntc").string();
    TensorContainer mel_out;
    mel_out.put("mel", result.mel);
    mel_out.save_file(mel_path);

    nlohmann::json boundaries = nlohmann::json::array();
    for (const auto& [b, e] : result.boundaries) boundaries.push_back({b, e});
    nlohmann::json summary{{"paragraph_id", doc.id},
                           {"sentences", doc.sentences.size()},
                           {"frames", result.mel.dim(0)},
                           {"mel_bins", result.mel.dim(1)},
                           {"boundaries", std::move(boundaries)},
                           {"stage_ms", result.stage_ms},
                           {"mel_file", mel_path},
                           {"config", nlohmann::json::parse(model_config_to_json_text(config))}};
    const std::string summary_path = (std::filesystem::path(out_dir) / "summary.json").string();
    std::ofstream sum(summary_path);
    if (!sum) throw InputError("cannot open '" + summary_path + "' for writing");
    sum << summary.dump(2) << '\n';
    std::cout << summary.dump(2) << '\n';
    return 0;
}

int cmd_bench(BenchSpec spec, const std::string& csv_path,
              const std::vector<std::string>& variant_names) {
    if (!variant_names.empty()) {
        spec.variants.clear();
        for (const std::string& name : variant_names) {
            auto v = variant_from_name(name);
            if (!v) throw InputError("unknown attention variant '" + name + "'");
            spec.variants.push_back(*v);
        }
    }
    const BenchReport report = run_bench(spec);
    std::cout << bench_json(report) << '\n';
    if (!csv_path.empty()) {
        std::ofstream out(csv_path);
        if (!out) throw InputError("cannot open '" + csv_path + "' for writing");
        out << bench_csv(report);
    }
    return 0;
}

int cmd_equivcheck(std::size_t trials, std::size_t max_len, std::size_t max_dim, double tol,
                   std::uint64_t seed) {
    const EquivalenceReport report = run_oracle_equivalence(trials, max_len, max_dim, seed);
    std::cout << "trials: " << report.trials << "\nmax relative difference: " << report.max_rel_error
              << "\ntolerance: " << tol << '\n';
    if (report.max_rel_error >= tol) {
        std::cout << "FAIL: replay with seed " << report.worst_seed << '\n';
        return 2;
    }
    std::cout << "OK\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"desk-scale paragraph TTS forward path with linearized attention"};
    app.require_subcommand(1);

    std::uint64_t seed = 42;
    bool seed_given = false;
    try {
        seed = seed_default();
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }

    // featurize
    auto* featurize = app.add_subcommand("featurize", "tokenize a paragraph and emit token features");
    std::string f_text, f_stats, f_out, f_mode = "auto", f_id = "p0";
    featurize->add_option("text", f_text, "paragraph text file")->required();
    featurize->add_option("--stats", f_stats, "corpus stats JSON file");
    featurize->add_option("--out", f_out, "output JSON path (default stdout)");
    featurize->add_option("--mode", f_mode, "language mode: auto|chinese|english");
    featurize->add_option("--id", f_id, "paragraph id");

    // forward
    auto* forward = app.add_subcommand("forward", "run the full forward path on a paragraph");
    std::string w_text, w_config, w_out = "out", w_mode = "auto", w_id = "p0", w_variant, w_embed;
    bool w_no_memory = false, w_no_context = false;
    forward->add_option("text", w_text, "paragraph text file")->required();
    forward->add_option("--config", w_config, "model config JSON file");
    forward->add_option("--out", w_out, "output directory (mel.ntc, summary.json)");
    forward->add_option("--mode", w_mode, "language mode: auto|chinese|english");
    forward->add_option("--id", w_id, "paragraph id");
    forward->add_option("--variant", w_variant, "attention variant: softmax|linearized|linearized_rpe");
    forward->add_flag("--no-memory-recurrence", w_no_memory, "disable the segment memory");
    forward->add_flag("--no-contextual-encoder", w_no_context, "disable the contextual encoder");
    forward->add_option("--embeddings", w_embed, "imported embedding container (tok:/sent: keys)");
    auto* w_seed_opt = forward->add_option("--seed", seed, "model seed (overrides config file)");

    // bench
    auto* bench = app.add_subcommand("bench", "attention kernel scaling benchmark");
    BenchSpec spec;
    std::string b_csv;
    std::vector<std::string> b_variants;
    bench->add_option("--lengths", spec.lengths, "sequence lengths, strictly increasing")
        ->delimiter(',');
    bench->add_option("--variants", b_variants, "subset of softmax,linearized,linearized_rpe")
        ->delimiter(',');
    bench->add_option("--dim", spec.dim, "per-head feature width");
    bench->add_option("--heads", spec.heads, "independent instances per run");
    bench->add_option("--repetitions", spec.repetitions, "timed repetitions (>= 3)");
    bench->add_option("--warmup", spec.warmup, "untimed warmup runs");
    bench->add_option("--threads", spec.threads, "parallel instances (throughput mode)");
    bench->add_option("--mem-cap-bytes", spec.mem_cap_bytes, "refuse runs estimated above this");
    bench->add_option("--csv", b_csv, "write CSV rows to this path");
    bench->add_option("--seed", seed, "input generation seed");

    // equivcheck
    auto* equiv = app.add_subcommand("equivcheck", "linearized vs ground-truth attention agreement");
    std::size_t e_trials = 200, e_max_len = 64, e_max_dim = 32;
    double e_tol = 1e-10;
    equiv->add_option("--trials", e_trials, "random instances");
    equiv->add_option("--max-len", e_max_len, "max sequence length");
    equiv->add_option("--max-dim", e_max_dim, "max feature width");
    equiv->add_option("--tol", e_tol, "max allowed relative difference");
    equiv->add_option("--seed", seed, "trial generation seed");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << e.what() << "\n\n" << app.help();
        return 1;
    }

    try {
        if (featurize->parsed()) return cmd_featurize(f_text, f_stats, f_out, f_mode, f_id);
        if (forward->parsed()) {
            seed_given = w_seed_opt->count() > 0;
            return cmd_forward(w_text, w_config, w_out, w_mode, w_id, w_variant, w_no_memory,
                               w_no_context, w_embed, seed, seed_given);
        }
        if (bench->parsed()) {
            spec.seed = seed;
            return cmd_bench(spec, b_csv, b_variants);
        }
        if (equiv->parsed()) return cmd_equivcheck(e_trials, e_max_len, e_max_dim, e_tol, seed);
    } catch (const ContractError& e) {
        std::cerr << "check failure: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}

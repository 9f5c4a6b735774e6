#include "ctxspeech/pipeline.hpp"

#include <chrono>
#include <cmath>

#include <json.hpp>

#include "ctxspeech/errors.hpp"
#include "ctxspeech/ops.hpp"
#include "ctxspeech/rng.hpp"

namespace ctxspeech {

namespace {

Tensor init_mat(Shape shape, Rng& rng) { return random_uniform(std::move(shape), rng, -0.05, 0.05); }

LayerNormWeights make_ln(std::size_t d) { return {Tensor::full({d}, 1.0), Tensor::zeros({d})}; }

// Weight draw order within a block: convm (pre, glu, dw, post), mhsa
// (q, k, v, o), convffn (w1, w2). Biases are zero and layer norms start at
// identity; only the matrices consume the stream.
ConformerBlockWeights make_block(const StackConfig& sc, Rng& rng) {
    const std::size_t d = sc.hidden;
    const std::size_t e = sc.ffn_expansion * d;
    const std::size_t k = sc.ffn_kernel;
    ConformerBlockWeights w;
    w.ln_conv = make_ln(d);
    w.ln_attn = make_ln(d);
    w.ln_ffn = make_ln(d);
    w.conv.pre_w = init_mat({k, d, d}, rng);
    w.conv.pre_b = Tensor::zeros({d});
    w.conv.glu_w = init_mat({1, d, 2 * d}, rng);
    w.conv.glu_b = Tensor::zeros({2 * d});
    w.conv.dw_w = init_mat({sc.depthwise_kernel, d}, rng);
    w.conv.dw_b = Tensor::zeros({d});
    w.conv.post_w = init_mat({k, d, d}, rng);
    w.conv.post_b = Tensor::zeros({d});
    w.attn.w_q = init_mat({d, d}, rng);
    w.attn.w_k = init_mat({d, d}, rng);
    w.attn.w_v = init_mat({d, d}, rng);
    w.attn.w_o = init_mat({d, d}, rng);
    w.ffn.w1 = init_mat({k, d, e}, rng);
    w.ffn.b1 = Tensor::zeros({e});
    w.ffn.w2 = init_mat({k, e, d}, rng);
    w.ffn.b2 = Tensor::zeros({d});
    return w;
}

ContextEncoderWeights make_context_weights(Rng& rng) {
    ContextEncoderWeights w;
    w.token_conv_w = init_mat({5, kTokenFeatureDim, kContextDim}, rng);
    w.token_conv_b = Tensor::zeros({kContextDim});
    w.token_ln = make_ln(kContextDim);
    w.token_proj_w = init_mat({kContextDim, kContextDim}, rng);
    w.token_proj_b = Tensor::zeros({kContextDim});
    w.sent_in_w = init_mat({kTextEmbedDim, kContextDim}, rng);
    w.sent_in_b = Tensor::zeros({kContextDim});
    w.gru.w_z = init_mat({kContextDim, kContextDim}, rng);
    w.gru.u_z = init_mat({kContextDim, kContextDim}, rng);
    w.gru.b_z = Tensor::zeros({kContextDim});
    w.gru.w_r = init_mat({kContextDim, kContextDim}, rng);
    w.gru.u_r = init_mat({kContextDim, kContextDim}, rng);
    w.gru.b_r = Tensor::zeros({kContextDim});
    w.gru.w_h = init_mat({kContextDim, kContextDim}, rng);
    w.gru.u_h = init_mat({kContextDim, kContextDim}, rng);
    w.gru.b_h = Tensor::zeros({kContextDim});
    w.fuse_w = init_mat({2 * kContextDim, kContextDim}, rng);
    w.fuse_b = Tensor::zeros({kContextDim});
    return w;
}

class StageTimer {
public:
    explicit StageTimer(std::map<std::string, double>& sink) : sink_(sink) {}
    template <typename Fn>
    auto run(const char* stage, Fn&& fn) {
        const auto t0 = std::chrono::steady_clock::now();
        if constexpr (std::is_void_v<decltype(fn())>) {
            fn();
            account(stage, t0);
        } else {
            auto result = fn();
            account(stage, t0);
            return result;
        }
    }

private:
    void account(const char* stage, std::chrono::steady_clock::time_point t0) {
        const auto dt = std::chrono::steady_clock::now() - t0;
        sink_[stage] += std::chrono::duration<double, std::milli>(dt).count();
    }
    std::map<std::string, double>& sink_;
};

// Reruns `fn`, tagging any pipeline error with the sentence it came from.
template <typename Fn>
auto with_sentence(std::size_t s, Fn&& fn) {
    const std::string tag = "sentence " + std::to_string(s) + ": ";
    try {
        return fn();
    } catch (const ShapeError& e) {
        throw ShapeError(tag + e.what());
    } catch (const ContractError& e) {
        throw ContractError(tag + e.what());
    } catch (const ConfigError& e) {
        throw ConfigError(tag + e.what());
    } catch (const ProviderError& e) {
        throw ProviderError(tag + e.what());
    } catch (const AlignmentError& e) {
        throw AlignmentError(tag + e.what());
    } catch (const InputError& e) {
        throw InputError(tag + e.what());
    }
}

void put_block(TensorContainer& c, const std::string& prefix, const ConformerBlockWeights& w) {
    c.put(prefix + ".convm.ln_gamma", w.ln_conv.gamma);
    c.put(prefix + ".convm.ln_beta", w.ln_conv.beta);
    c.put(prefix + ".convm.pre_w", w.conv.pre_w);
    c.put(prefix + ".convm.pre_b", w.conv.pre_b);
    c.put(prefix + ".convm.glu_w", w.conv.glu_w);
    c.put(prefix + ".convm.glu_b", w.conv.glu_b);
    c.put(prefix + ".convm.dw_w", w.conv.dw_w);
    c.put(prefix + ".convm.dw_b", w.conv.dw_b);
    c.put(prefix + ".convm.post_w", w.conv.post_w);
    c.put(prefix + ".convm.post_b", w.conv.post_b);
    c.put(prefix + ".mhsa.ln_gamma", w.ln_attn.gamma);
    c.put(prefix + ".mhsa.ln_beta", w.ln_attn.beta);
    c.put(prefix + ".mhsa.w_q", w.attn.w_q);
    c.put(prefix + ".mhsa.w_k", w.attn.w_k);
    c.put(prefix + ".mhsa.w_v", w.attn.w_v);
    c.put(prefix + ".mhsa.w_o", w.attn.w_o);
    c.put(prefix + ".convffn.ln_gamma", w.ln_ffn.gamma);
    c.put(prefix + ".convffn.ln_beta", w.ln_ffn.beta);
    c.put(prefix + ".convffn.w1", w.ffn.w1);
    c.put(prefix + ".convffn.b1", w.ffn.b1);
    c.put(prefix + ".convffn.w2", w.ffn.w2);
    c.put(prefix + ".convffn.b2", w.ffn.b2);
}

ConformerBlockWeights get_block(const TensorContainer& c, const std::string& prefix) {
    ConformerBlockWeights w;
    w.ln_conv = {c.get(prefix + ".convm.ln_gamma"), c.get(prefix + ".convm.ln_beta")};
    w.conv.pre_w = c.get(prefix + ".convm.pre_w");
    w.conv.pre_b = c.get(prefix + ".convm.pre_b");
    w.conv.glu_w = c.get(prefix + ".convm.glu_w");
    w.conv.glu_b = c.get(prefix + ".convm.glu_b");
    w.conv.dw_w = c.get(prefix + ".convm.dw_w");
    w.conv.dw_b = c.get(prefix + ".convm.dw_b");
    w.conv.post_w = c.get(prefix + ".convm.post_w");
    w.conv.post_b = c.get(prefix + ".convm.post_b");
    w.ln_attn = {c.get(prefix + ".mhsa.ln_gamma"), c.get(prefix + ".mhsa.ln_beta")};
    w.attn.w_q = c.get(prefix + ".mhsa.w_q");
    w.attn.w_k = c.get(prefix + ".mhsa.w_k");
    w.attn.w_v = c.get(prefix + ".mhsa.w_v");
    w.attn.w_o = c.get(prefix + ".mhsa.w_o");
    w.ln_ffn = {c.get(prefix + ".convffn.ln_gamma"), c.get(prefix + ".convffn.ln_beta")};
    w.ffn.w1 = c.get(prefix + ".convffn.w1");
    w.ffn.b1 = c.get(prefix + ".convffn.b1");
    w.ffn.w2 = c.get(prefix + ".convffn.w2");
    w.ffn.b2 = c.get(prefix + ".convffn.b2");
    return w;
}

} // namespace

void ModelConfig::validate() const {
    std::string problems;
    auto bad = [&](const std::string& p) { problems += problems.empty() ? p : "; " + p; };
    if (hidden == 0) bad("hidden must be >= 1");
    if (heads == 0) bad("heads must be >= 1");
    if (head_dim == 0) bad("head_dim must be >= 1");
    if (heads != 0 && head_dim != 0 && hidden != heads * head_dim)
        bad("hidden " + std::to_string(hidden) + " != heads " + std::to_string(heads) + " x head_dim " +
            std::to_string(head_dim));
    if (encoder_blocks == 0) bad("encoder_blocks must be >= 1");
    if (decoder_blocks == 0) bad("decoder_blocks must be >= 1");
    if (context_window == 0 || context_window % 2 == 0)
        bad("context_window must be odd, got " + std::to_string(context_window));
    if (mel_bins == 0) bad("mel_bins must be >= 1");
    if (contextual_encoder && hidden != kContextDim)
        bad("contextual encoder produces width " + std::to_string(kContextDim) +
            ", incompatible with hidden " + std::to_string(hidden));
    if (!(rpe_decay > 0.0) || !std::isfinite(rpe_decay))
        bad("rpe_decay must be finite and positive");
    if (rpe_max_positions == 0) bad("rpe_max_positions must be >= 1");
    if (frames_per_phoneme == 0) bad("frames_per_phoneme must be >= 1");
    if (phoneme_vocab == 0) bad("phoneme_vocab must be >= 1");
    if (!problems.empty()) throw ConfigError("invalid model config: " + problems);
}

AttentionConfig ModelConfig::attention() const {
    AttentionConfig cfg;
    cfg.num_heads = heads;
    cfg.head_dim = head_dim;
    cfg.variant = variant;
    cfg.rpe = RpeSpec{rpe_decay, rpe_seed, rpe_shared_across_heads};
    return cfg;
}

StackConfig ModelConfig::encoder_stack() const {
    StackConfig sc;
    sc.num_blocks = encoder_blocks;
    sc.hidden = hidden;
    sc.num_heads = heads;
    sc.variant = variant;
    sc.rpe = RpeSpec{rpe_decay, rpe_seed, rpe_shared_across_heads};
    return sc;
}

StackConfig ModelConfig::decoder_stack() const {
    StackConfig sc = encoder_stack();
    sc.num_blocks = decoder_blocks;
    return sc;
}

ModelConfig model_config_from_json_text(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    if (!j.is_object()) throw ConfigError("config JSON must be an object");
    ModelConfig cfg;
    try {
        for (const auto& [key, value] : j.items()) {
            if (key == "encoder_blocks") cfg.encoder_blocks = value.get<std::size_t>();
            else if (key == "decoder_blocks") cfg.decoder_blocks = value.get<std::size_t>();
            else if (key == "hidden") cfg.hidden = value.get<std::size_t>();
            else if (key == "heads") cfg.heads = value.get<std::size_t>();
            else if (key == "head_dim") cfg.head_dim = value.get<std::size_t>();
            else if (key == "encoder_mem_len") cfg.encoder_mem_len = value.get<std::size_t>();
            else if (key == "decoder_mem_len") cfg.decoder_mem_len = value.get<std::size_t>();
            else if (key == "context_window") cfg.context_window = value.get<std::size_t>();
            else if (key == "mel_bins") cfg.mel_bins = value.get<std::size_t>();
            else if (key == "variant") {
                auto v = variant_from_name(value.get<std::string>());
                if (!v) throw ConfigError("unknown attention variant '" + value.get<std::string>() + "'");
                cfg.variant = *v;
            } else if (key == "seed") cfg.seed = value.get<std::uint64_t>();
            else if (key == "memory_recurrence") cfg.memory_recurrence = value.get<bool>();
            else if (key == "contextual_encoder") cfg.contextual_encoder = value.get<bool>();
            else if (key == "sinusoidal_ape") cfg.sinusoidal_ape = value.get<bool>();
            else if (key == "dropout_enabled") cfg.dropout_enabled = value.get<bool>();
            else if (key == "rpe_decay") cfg.rpe_decay = value.get<double>();
            else if (key == "rpe_seed") cfg.rpe_seed = value.get<std::uint64_t>();
            else if (key == "rpe_shared_across_heads") cfg.rpe_shared_across_heads = value.get<bool>();
            else if (key == "rpe_max_positions") cfg.rpe_max_positions = value.get<std::size_t>();
            else if (key == "frames_per_phoneme") cfg.frames_per_phoneme = value.get<std::size_t>();
            else if (key == "phoneme_vocab") cfg.phoneme_vocab = value.get<std::size_t>();
            else throw ConfigError("unknown config key '" + key + "'");
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("config value has the wrong type: ") + e.what());
    }
    return cfg;
}

std::string model_config_to_json_text(const ModelConfig& cfg) {
    nlohmann::json j{{"encoder_blocks", cfg.encoder_blocks},
                     {"decoder_blocks", cfg.decoder_blocks},
                     {"hidden", cfg.hidden},
                     {"heads", cfg.heads},
                     {"head_dim", cfg.head_dim},
                     {"encoder_mem_len", cfg.encoder_mem_len},
                     {"decoder_mem_len", cfg.decoder_mem_len},
                     {"context_window", cfg.context_window},
                     {"mel_bins", cfg.mel_bins},
                     {"variant", variant_name(cfg.variant)},
                     {"seed", cfg.seed},
                     {"memory_recurrence", cfg.memory_recurrence},
                     {"contextual_encoder", cfg.contextual_encoder},
                     {"sinusoidal_ape", cfg.sinusoidal_ape},
                     {"dropout_enabled", cfg.dropout_enabled},
                     {"rpe_decay", cfg.rpe_decay},
                     {"rpe_seed", cfg.rpe_seed},
                     {"rpe_shared_across_heads", cfg.rpe_shared_across_heads},
                     {"rpe_max_positions", cfg.rpe_max_positions},
                     {"frames_per_phoneme", cfg.frames_per_phoneme},
                     {"phoneme_vocab", cfg.phoneme_vocab}};
    return j.dump(2);
}

Model build_model(const ModelConfig& config) {
    config.validate();
    Model m;
    m.config = config;
    Rng rng(config.seed);
    // draw order: phoneme table, encoder blocks, decoder blocks, context
    // encoder, mel projection
    m.phoneme_embed = init_mat({config.phoneme_vocab, config.hidden}, rng);
    const StackConfig enc = config.encoder_stack();
    const StackConfig dec = config.decoder_stack();
    m.encoder.reserve(config.encoder_blocks);
    for (std::size_t n = 0; n < config.encoder_blocks; ++n) m.encoder.push_back(make_block(enc, rng));
    m.decoder.reserve(config.decoder_blocks);
    for (std::size_t n = 0; n < config.decoder_blocks; ++n) m.decoder.push_back(make_block(dec, rng));
    m.context = make_context_weights(rng);
    m.mel_w = init_mat({config.hidden, config.mel_bins}, rng);
    m.mel_b = Tensor::zeros({config.mel_bins});
    m.rpe = PreparedRpe::build(config.attention(), config.rpe_max_positions);
    return m;
}

TensorContainer save_checkpoint(const Model& model) {
    TensorContainer c;
    c.put("embed.phoneme", model.phoneme_embed);
    for (std::size_t n = 0; n < model.encoder.size(); ++n)
        put_block(c, "enc.block" + std::to_string(n), model.encoder[n]);
    for (std::size_t n = 0; n < model.decoder.size(); ++n)
        put_block(c, "dec.block" + std::to_string(n), model.decoder[n]);
    const ContextEncoderWeights& w = model.context;
    c.put("ctx.token_conv_w", w.token_conv_w);
    c.put("ctx.token_conv_b", w.token_conv_b);
    c.put("ctx.token_ln_gamma", w.token_ln.gamma);
    c.put("ctx.token_ln_beta", w.token_ln.beta);
    c.put("ctx.token_proj_w", w.token_proj_w);
    c.put("ctx.token_proj_b", w.token_proj_b);
    c.put("ctx.sent_in_w", w.sent_in_w);
    c.put("ctx.sent_in_b", w.sent_in_b);
    c.put("ctx.gru_wz", w.gru.w_z);
    c.put("ctx.gru_uz", w.gru.u_z);
    c.put("ctx.gru_bz", w.gru.b_z);
    c.put("ctx.gru_wr", w.gru.w_r);
    c.put("ctx.gru_ur", w.gru.u_r);
    c.put("ctx.gru_br", w.gru.b_r);
    c.put("ctx.gru_wh", w.gru.w_h);
    c.put("ctx.gru_uh", w.gru.u_h);
    c.put("ctx.gru_bh", w.gru.b_h);
    c.put("ctx.fuse_w", w.fuse_w);
    c.put("ctx.fuse_b", w.fuse_b);
    c.put("out.mel_w", model.mel_w);
    c.put("out.mel_b", model.mel_b);
    return c;
}

Model load_checkpoint(const ModelConfig& config, const TensorContainer& weights) {
    config.validate();
    Model m;
    m.config = config;
    m.phoneme_embed = weights.get("embed.phoneme");
    for (std::size_t n = 0; n < config.encoder_blocks; ++n)
        m.encoder.push_back(get_block(weights, "enc.block" + std::to_string(n)));
    for (std::size_t n = 0; n < config.decoder_blocks; ++n)
        m.decoder.push_back(get_block(weights, "dec.block" + std::to_string(n)));
    ContextEncoderWeights& w = m.context;
    w.token_conv_w = weights.get("ctx.token_conv_w");
    w.token_conv_b = weights.get("ctx.token_conv_b");
    w.token_ln = {weights.get("ctx.token_ln_gamma"), weights.get("ctx.token_ln_beta")};
    w.token_proj_w = weights.get("ctx.token_proj_w");
    w.token_proj_b = weights.get("ctx.token_proj_b");
    w.sent_in_w = weights.get("ctx.sent_in_w");
    w.sent_in_b = weights.get("ctx.sent_in_b");
    w.gru.w_z = weights.get("ctx.gru_wz");
    w.gru.u_z = weights.get("ctx.gru_uz");
    w.gru.b_z = weights.get("ctx.gru_bz");
    w.gru.w_r = weights.get("ctx.gru_wr");
    w.gru.u_r = weights.get("ctx.gru_ur");
    w.gru.b_r = weights.get("ctx.gru_br");
    w.gru.w_h = weights.get("ctx.gru_wh");
    w.gru.u_h = weights.get("ctx.gru_uh");
    w.gru.b_h = weights.get("ctx.gru_bh");
    w.fuse_w = weights.get("ctx.fuse_w");
    w.fuse_b = weights.get("ctx.fuse_b");
    m.mel_w = weights.get("out.mel_w");
    m.mel_b = weights.get("out.mel_b");
    m.rpe = PreparedRpe::build(config.attention(), config.rpe_max_positions);
    return m;
}

std::size_t phoneme_id(std::string_view token_text, std::size_t index, std::size_t vocab) {
    if (vocab == 0) throw ConfigError("phoneme vocab must be >= 1");
    return static_cast<std::size_t>(mix_seed(fnv1a64(token_text), index) % vocab);
}

Tensor phoneme_embeddings(const Model& model, const Sentence& sentence) {
    const std::size_t hidden = model.config.hidden;
    const std::size_t total = sentence.phoneme_total();
    if (total == 0) throw InputError("sentence has no phonemes");
    std::vector<double> rows(total * hidden);
    const double* table = model.phoneme_embed.ptr();
    std::size_t r = 0;
    for (const Token& tok : sentence.tokens) {
        for (std::size_t i = 0; i < tok.phoneme_count; ++i, ++r) {
            const std::size_t id = phoneme_id(tok.text, i, model.config.phoneme_vocab);
            std::copy(table + id * hidden, table + (id + 1) * hidden, rows.data() + r * hidden);
        }
    }
    return Tensor::from_vec({total, hidden}, std::move(rows));
}

Tensor length_regulate(const Tensor& x, std::span<const std::size_t> durations) {
    if (x.rank() != 2)
        throw ShapeError("length_regulate expects rank-2 input, got " + shape_str(x.shape()));
    if (durations.size() != x.dim(0))
        throw AlignmentError("length_regulate got " + std::to_string(durations.size()) +
                             " durations for " + std::to_string(x.dim(0)) + " rows");
    for (std::size_t i = 0; i < durations.size(); ++i)
        if (durations[i] == 0)
            throw InputError("duration at index " + std::to_string(i) + " must be positive");
    return repeat_rows(x, durations);
}

Tensor sinusoidal_encoding(std::size_t len, std::size_t dim, std::size_t offset) {
    if (len == 0 || dim == 0) throw ShapeError("sinusoidal encoding needs len >= 1 and dim >= 1");
    std::vector<double> pe(len * dim);
    for (std::size_t p = 0; p < len; ++p) {
        const double pos = static_cast<double>(offset + p);
        for (std::size_t i = 0; i < dim; i += 2) {
            const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(dim));
            pe[p * dim + i] = std::sin(pos * freq);
            if (i + 1 < dim) pe[p * dim + i + 1] = std::cos(pos * freq);
        }
    }
    return Tensor::from_vec({len, dim}, std::move(pe));
}

SynthesisResult synthesize_paragraph(const Model& model, const ParagraphDocument& doc,
                                     const EmbeddingProvider& provider,
                                     const std::vector<std::vector<std::size_t>>* durations) {
    const ModelConfig& cfg = model.config;
    cfg.validate();
    doc.validate();
    if (durations != nullptr && durations->size() != doc.sentences.size())
        throw AlignmentError("got durations for " + std::to_string(durations->size()) +
                             " sentences, document has " + std::to_string(doc.sentences.size()));

    SynthesisResult result;
    StageTimer timer(result.stage_ms);

    const ParagraphDocument* docs = &doc;
    const CorpusStats stats = compute_corpus_stats({docs, 1});
    const auto features = timer.run("featurize", [&] { return token_stats(doc, stats); });

    const bool enc_rec = cfg.memory_recurrence && cfg.encoder_mem_len > 0;
    const bool dec_rec = cfg.memory_recurrence && cfg.decoder_mem_len > 0;
    SegmentMemory enc_mem, dec_mem;
    if (enc_rec) enc_mem = new_memory(cfg.encoder_blocks, cfg.encoder_mem_len);
    if (dec_rec) dec_mem = new_memory(cfg.decoder_blocks, cfg.decoder_mem_len);

    const StackConfig enc_cfg = cfg.encoder_stack();
    const StackConfig dec_cfg = cfg.decoder_stack();
    ContextEncoderConfig ctx_cfg;
    ctx_cfg.window_size = cfg.context_window;
    ctx_cfg.dropout_enabled = cfg.dropout_enabled;
    ctx_cfg.dropout_seed = mix_seed(cfg.seed, fnv1a64("dropout"));

    std::vector<Tensor> mels;
    mels.reserve(doc.sentences.size());
    std::size_t frame_cursor = 0;
    for (std::size_t s = 0; s < doc.sentences.size(); ++s) {
        with_sentence(s, [&] {
            const Sentence& sent = doc.sentences[s];
            const std::size_t phonemes = sent.phoneme_total();

            Tensor enc_in = timer.run("context", [&] {
                Tensor phon = phoneme_embeddings(model, sent);
                if (!cfg.contextual_encoder) return phon;
                Tensor tok = token_context_embedding(doc, s, features, provider, model.context, ctx_cfg);
                Tensor sctx = sentence_context_embedding(doc, s, provider, model.context, ctx_cfg);
                return fuse(phon, tok, sctx);
            });
            if (cfg.sinusoidal_ape)
                enc_in = add(enc_in, sinusoidal_encoding(phonemes, cfg.hidden));

            StackResult enc_out = timer.run("encoder", [&] {
                return stack_forward(enc_in, model.encoder, enc_cfg, enc_rec ? &enc_mem : nullptr,
                                     &model.rpe);
            });
            if (enc_rec) enc_mem = enc_out.memory;

            std::vector<std::size_t> dur;
            if (durations != nullptr) dur = (*durations)[s];
            else dur.assign(phonemes, cfg.frames_per_phoneme);
            Tensor regulated =
                timer.run("length_regulate", [&] { return length_regulate(enc_out.output, dur); });
            const std::size_t frames = regulated.dim(0);
            if (cfg.sinusoidal_ape)
                regulated = add(regulated, sinusoidal_encoding(frames, cfg.hidden));

            StackResult dec_out = timer.run("decoder", [&] {
                return stack_forward(regulated, model.decoder, dec_cfg, dec_rec ? &dec_mem : nullptr,
                                     &model.rpe);
            });
            if (dec_rec) dec_mem = dec_out.memory;

            Tensor mel = timer.run("mel", [&] {
                return broadcast_add(matmul(dec_out.output, model.mel_w), model.mel_b);
            });
            mels.push_back(mel);
            result.boundaries.emplace_back(frame_cursor, frame_cursor + frames);
            frame_cursor += frames;
        });
    }

    result.mel = mels.size() == 1 ? mels.front() : concat(mels, 0);
    result.encoder_memory = enc_mem;
    result.decoder_memory = dec_mem;
    return result;
}

} // namespace ctxspeech

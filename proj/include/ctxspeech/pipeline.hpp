#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "ctxspeech/attention.hpp"
#include "ctxspeech/conformer.hpp"
#include "ctxspeech/container.hpp"
#include "ctxspeech/context.hpp"
#include "ctxspeech/memory.hpp"
#include "ctxspeech/tensor.hpp"

namespace ctxspeech {

struct ModelConfig {
    std::size_t encoder_blocks = 4;
    std::size_t decoder_blocks = 4;
    std::size_t hidden = 384;
    std::size_t heads = 4;
    std::size_t head_dim = 96;
    std::size_t encoder_mem_len = 128; // 0 disables encoder recurrence
    std::size_t decoder_mem_len = 64;  // counts decoder-input frames; 0 disables
    std::size_t context_window = 11;
    std::size_t mel_bins = 80;
    AttentionVariant variant = AttentionVariant::LinearizedRpe;
    std::uint64_t seed = 42;

    // ablation and behavior switches
    bool memory_recurrence = true;  // MR off: both stacks run segment-local
    bool contextual_encoder = true; // TCE off: phoneme embeddings pass through unfused
    bool sinusoidal_ape = false;    // adds sinusoidal absolute positions at the encoder
                                    // and decoder inputs; meant for the softmax baseline
    bool dropout_enabled = false;

    double rpe_decay = 1.0;
    std::uint64_t rpe_seed = 7;
    bool rpe_shared_across_heads = false;
    std::size_t rpe_max_positions = 4096; // cached permutation powers; larger positions compose on the fly

    std::size_t frames_per_phoneme = 4; // duration stub when no durations are supplied
    std::size_t phoneme_vocab = 128;

    void validate() const; // ConfigError listing every violated constraint
    AttentionConfig attention() const;
    StackConfig encoder_stack() const;
    StackConfig decoder_stack() const;
};

ModelConfig model_config_from_json_text(const std::string& text);
std::string model_config_to_json_text(const ModelConfig& cfg);

struct Model {
    ModelConfig config;
    Tensor phoneme_embed; // [vocab x hidden]
    std::vector<ConformerBlockWeights> encoder;
    std::vector<ConformerBlockWeights> decoder;
    ContextEncoderWeights context;
    Tensor mel_w, mel_b; // [hidden x mel_bins], [mel_bins]
    PreparedRpe rpe;     // shared by both stacks
};

// All weights drawn from one stream seeded by config.seed, in a fixed
// documented order, so construction is reproducible bit for bit.
Model build_model(const ModelConfig& config);

// Named-tensor snapshot of every weight. Names follow
//   embed.phoneme
//   {enc|dec}.block{n}.convm.{ln_gamma,ln_beta,pre_w,pre_b,glu_w,glu_b,dw_w,dw_b,post_w,post_b}
//   {enc|dec}.block{n}.mhsa.{ln_gamma,ln_beta,w_q,w_k,w_v,w_o}
//   {enc|dec}.block{n}.convffn.{ln_gamma,ln_beta,w1,b1,w2,b2}
//   ctx.{token_conv_w,token_conv_b,token_ln_gamma,token_ln_beta,token_proj_w,token_proj_b,
//        sent_in_w,sent_in_b,gru_{wz,uz,bz,wr,ur,br,wh,uh,bh},fuse_w,fuse_b}
//   out.{mel_w,mel_b}
TensorContainer save_checkpoint(const Model& model);
Model load_checkpoint(const ModelConfig& config, const TensorContainer& weights);

// Phoneme identity for token `text`, phoneme ordinal `index` within the
// token: a stable hash into the embedding vocabulary.
std::size_t phoneme_id(std::string_view token_text, std::size_t index, std::size_t vocab);

// Rows of the phoneme embedding table for one sentence, [P x hidden].
Tensor phoneme_embeddings(const Model& model, const Sentence& sentence);

// row p repeated durations[p] times; every duration must be >= 1
Tensor length_regulate(const Tensor& x, std::span<const std::size_t> durations);

// sin/cos absolute-position table, rows `offset`..`offset+len-1`, width `dim`
Tensor sinusoidal_encoding(std::size_t len, std::size_t dim, std::size_t offset = 0);

struct SynthesisResult {
    Tensor mel; // [total frames x mel_bins]
    std::vector<std::pair<std::size_t, std::size_t>> boundaries; // per-sentence [begin, end) frames
    SegmentMemory encoder_memory, decoder_memory; // state after the last sentence
    std::map<std::string, double> stage_ms;       // wall time per pipeline stage
};

// Runs the full forward path over every sentence of the paragraph in order.
// `durations` gives frames per phoneme per sentence; nullptr uses the
// constant stub from the config. Errors from any stage are rethrown with the
// sentence index attached.
SynthesisResult synthesize_paragraph(const Model& model, const ParagraphDocument& doc,
                                     const EmbeddingProvider& provider,
                                     const std::vector<std::vector<std::size_t>>* durations = nullptr);

} // namespace ctxspeech

#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "ctxspeech/conformer.hpp"
#include "ctxspeech/container.hpp"
#include "ctxspeech/tensor.hpp"

namespace ctxspeech {

inline constexpr std::size_t kTextEmbedDim = 768;   // provider output width
inline constexpr std::size_t kStatFeatureDim = 6;   // per-token statistical features
inline constexpr std::size_t kTokenFeatureDim = kTextEmbedDim + kStatFeatureDim; // 774
inline constexpr std::size_t kContextDim = 384;

struct Token {
    std::string text;
    std::size_t phoneme_count = 1;
};

struct Sentence {
    std::string text; // original text slice, used for sentence embeddings
    std::vector<Token> tokens;
    std::size_t phoneme_total() const;
};

struct ParagraphDocument {
    std::string id;
    std::vector<Sentence> sentences;

    void validate() const; // InputError when structurally invalid
    std::size_t token_total() const;
};

enum class LanguageMode { Auto, Chinese, English };

// Pluggable phoneme lookup for tokenization. The default treats a CJK
// character as three phonemes and any other token as one phoneme per
// alphanumeric character (at least one).
using PhonemeLexicon = std::function<std::size_t(std::string_view)>;
std::size_t default_phoneme_count(std::string_view token_text);

// Sentence split on terminal punctuation (。！？.!?) with trailing closing
// quotes kept on the sentence they end. Chinese mode emits one token per
// character; English mode splits on whitespace; Auto does both, keyed off
// the script of each code point. Punctuation never becomes a token.
ParagraphDocument tokenize(std::string_view text, LanguageMode mode = LanguageMode::Auto,
                           std::string paragraph_id = "p0", const PhonemeLexicon& lexicon = {});

// Six per-token features, all in (0,1] under 1-based indexing:
//   f0 token index / sentence token count     f3 sentence token count / corpus max
//   f1 token index in paragraph / total       f4 paragraph token count / corpus max
//   f2 sentence index / sentence count        f5 sentence count / corpus max
struct TokenStatFeatures {
    std::array<double, kStatFeatureDim> f{};
};

struct CorpusStats {
    std::uint64_t max_tokens_per_sentence = 1;
    std::uint64_t max_tokens_per_paragraph = 1;
    std::uint64_t max_sentences_per_paragraph = 1;
    void validate() const;
};

CorpusStats compute_corpus_stats(std::span<const ParagraphDocument> docs);

// Features per sentence, aligned with doc.sentences. Counts that exceed a
// corpus maximum clamp the ratio to 1.0 (with a warning on stderr).
std::vector<std::vector<TokenStatFeatures>> token_stats(const ParagraphDocument& doc,
                                                        const CorpusStats& stats);

class EmbeddingProvider {
public:
    virtual ~EmbeddingProvider() = default;
    // both return [768]; must be deterministic in their inputs
    virtual Tensor token_embedding(std::string_view token_text, std::string_view sentence_text) const = 0;
    virtual Tensor sentence_embedding(std::string_view sentence_text) const = 0;
};

// Deterministic stand-in for a real text encoder: the text hashes to a seed,
// the seed expands to 768 values, and the vector is L2-normalized. The
// sentence context argument is ignored.
class HashEmbeddingProvider : public EmbeddingProvider {
public:
    explicit HashEmbeddingProvider(std::uint64_t seed) : seed_(seed) {}
    Tensor token_embedding(std::string_view token_text, std::string_view sentence_text) const override;
    Tensor sentence_embedding(std::string_view sentence_text) const override;

private:
    Tensor expand(std::string_view salt, std::string_view text) const;
    std::uint64_t seed_;
};

// Looks vectors up in a tensor container keyed by "tok:{sha1(text)}" and
// "sent:{sha1(text)}". Missing keys and wrong widths raise ProviderError.
class ImportedEmbeddingProvider : public EmbeddingProvider {
public:
    explicit ImportedEmbeddingProvider(TensorContainer store) : store_(std::move(store)) {}
    static ImportedEmbeddingProvider from_file(const std::string& path);
    Tensor token_embedding(std::string_view token_text, std::string_view sentence_text) const override;
    Tensor sentence_embedding(std::string_view sentence_text) const override;

private:
    Tensor lookup(const std::string& key) const;
    TensorContainer store_;
};

// Half-open [begin, end) range of sentence indices around `center`, clipped
// at the paragraph edges and never padded.
std::pair<std::size_t, std::size_t> context_window(std::size_t center, std::size_t n_sentences,
                                                   std::size_t window_size = 11);

struct GruWeights {
    Tensor w_z, u_z, b_z; // update gate
    Tensor w_r, u_r, b_r; // reset gate
    Tensor w_h, u_h, b_h; // candidate state
};

// Left-to-right over the rows of xs [T x in], zero initial state, returns the
// final hidden state [1 x H].
Tensor gru_forward(const Tensor& xs, const GruWeights& w);

struct ContextEncoderWeights {
    Tensor token_conv_w, token_conv_b;  // [5, 774, 384], [384]
    LayerNormWeights token_ln;          // [384]
    Tensor token_proj_w, token_proj_b;  // [384, 384], [384]
    Tensor sent_in_w, sent_in_b;        // [768, 384], shared by window and center sentences
    GruWeights gru;                     // input 384, hidden 384
    Tensor fuse_w, fuse_b;              // [768, 384]
};

struct ContextEncoderConfig {
    std::size_t window_size = 11; // 5 sentences before and after the center
    double dropout_rate = 0.5;
    bool dropout_enabled = false; // inference default; training would enable it
    std::uint64_t dropout_seed = 0;
};

// Token-level path: concat(embedding, stats) rows upsampled to phoneme rate,
// then conv, relu, layer norm, dropout, projection. Output [P x 384] where P
// is the sentence's phoneme total.
Tensor token_context_embedding(const ParagraphDocument& doc, std::size_t sentence_idx,
                               const std::vector<std::vector<TokenStatFeatures>>& features,
                               const EmbeddingProvider& provider, const ContextEncoderWeights& w,
                               const ContextEncoderConfig& cfg);

// Sentence-level path: window sentence embeddings through the input
// projection and a GRU; the final state concatenated with the projected
// center embedding, then relu, dropout, linear, and broadcast to [P x 384].
Tensor sentence_context_embedding(const ParagraphDocument& doc, std::size_t sentence_idx,
                                  const EmbeddingProvider& provider, const ContextEncoderWeights& w,
                                  const ContextEncoderConfig& cfg);

// Elementwise sum of the phoneme embeddings and both context paths.
Tensor fuse(const Tensor& phoneme_embeddings, const Tensor& token_ctx, const Tensor& sent_ctx);

} // namespace ctxspeech

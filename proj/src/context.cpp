#include "ctxspeech/context.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>

#include "ctxspeech/errors.hpp"
#include "ctxspeech/ops.hpp"
#include "ctxspeech/rng.hpp"
#include "ctxspeech/sha1.hpp"

namespace ctxspeech {

namespace {

// Decodes one UTF-8 code point starting at i and advances i. Malformed bytes
// decode as themselves so junk input degrades instead of crashing.
char32_t next_codepoint(std::string_view s, std::size_t& i) {
    const unsigned char b0 = static_cast<unsigned char>(s[i]);
    std::size_t len = 1;
    char32_t cp = b0;
    if ((b0 & 0x80u) == 0) {
        len = 1;
    } else if ((b0 & 0xE0u) == 0xC0u) {
        len = 2;
        cp = b0 & 0x1Fu;
    } else if ((b0 & 0xF0u) == 0xE0u) {
        len = 3;
        cp = b0 & 0x0Fu;
    } else if ((b0 & 0xF8u) == 0xF0u) {
        len = 4;
        cp = b0 & 0x07u;
    }
    if (i + len > s.size()) len = 1, cp = b0;
    for (std::size_t k = 1; k < len; ++k) {
        const unsigned char bk = static_cast<unsigned char>(s[i + k]);
        if ((bk & 0xC0u) != 0x80u) {
            len = 1;
            cp = b0;
            break;
        }
        cp = (cp << 6) | (bk & 0x3Fu);
    }
    i += len;
    return cp;
}

bool is_cjk(char32_t cp) {
    return (cp >= 0x4E00 && cp <= 0x9FFF) || (cp >= 0x3400 && cp <= 0x4DBF) ||
           (cp >= 0xF900 && cp <= 0xFAFF);
}

bool is_terminal(char32_t cp) {
    return cp == U'.' || cp == U'!' || cp == U'?' || cp == 0x3002 /* 。 */ ||
           cp == 0xFF01 /* ！ */ || cp == 0xFF1F /* ？ */;
}

bool is_closing_quote(char32_t cp) {
    return cp == U'"' || cp == U'\'' || cp == 0x201D /* ” */ || cp == 0x2019 /* ’ */ ||
           cp == 0x300D /* 」 */ || cp == 0x300F /* 』 */ || cp == U')' || cp == 0xFF09 /* ） */ ||
           cp == 0x300B /* 》 */;
}

// Characters that may appear inside a token. ASCII keeps alphanumerics;
// common CJK/fullwidth/general punctuation blocks are separators; any other
// non-ASCII code point counts as a letter.
bool is_token_char(char32_t cp) {
    if (cp < 0x80) return std::isalnum(static_cast<unsigned char>(cp)) != 0;
    if (cp >= 0x3000 && cp <= 0x303F) return false; // CJK punctuation
    if (cp >= 0x2000 && cp <= 0x206F) return false; // general punctuation
    if (cp >= 0xFF00 && cp <= 0xFFEF) {
        // fullwidth block: keep the alphanumeric forms only
        return (cp >= 0xFF10 && cp <= 0xFF19) || (cp >= 0xFF21 && cp <= 0xFF3A) ||
               (cp >= 0xFF41 && cp <= 0xFF5A);
    }
    return true;
}

std::string_view trim_ws(std::string_view s) {
    std::size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return s.substr(b, e - b);
}

std::vector<Token> tokenize_sentence(std::string_view sentence, LanguageMode mode,
                                     const PhonemeLexicon& lex) {
    std::vector<Token> tokens;
    std::string word;
    auto flush_word = [&] {
        if (!word.empty()) {
            tokens.push_back(Token{word, lex(word)});
            word.clear();
        }
    };
    std::size_t i = 0;
    while (i < sentence.size()) {
        const std::size_t begin = i;
        const char32_t cp = next_codepoint(sentence, i);
        if (!is_token_char(cp)) {
            flush_word();
            continue;
        }
        const std::string_view bytes = sentence.substr(begin, i - begin);
        const bool own_token = mode == LanguageMode::Chinese || (mode == LanguageMode::Auto && is_cjk(cp));
        if (own_token) {
            flush_word();
            std::string text(bytes);
            tokens.push_back(Token{text, lex(text)});
        } else {
            word.append(bytes);
        }
    }
    flush_word();
    return tokens;
}

Tensor provider_vector(const Tensor& t, const std::string& what) {
    if (t.size() != kTextEmbedDim)
        throw ProviderError(what + " returned " + std::to_string(t.size()) + " values, expected " +
                            std::to_string(kTextEmbedDim));
    return t;
}

} // namespace

std::size_t Sentence::phoneme_total() const {
    std::size_t total = 0;
    for (const Token& t : tokens) total += t.phoneme_count;
    return total;
}

void ParagraphDocument::validate() const {
    if (sentences.empty()) throw InputError("paragraph '" + id + "' has no sentences");
    for (std::size_t s = 0; s < sentences.size(); ++s) {
        if (sentences[s].tokens.empty())
            throw InputError("paragraph '" + id + "' sentence " + std::to_string(s) + " has no tokens");
        for (std::size_t k = 0; k < sentences[s].tokens.size(); ++k) {
            if (sentences[s].tokens[k].phoneme_count == 0)
                throw InputError("paragraph '" + id + "' sentence " + std::to_string(s) + " token " +
                                 std::to_string(k) + " has phoneme_count 0");
        }
    }
}

std::size_t ParagraphDocument::token_total() const {
    std::size_t total = 0;
    for (const Sentence& s : sentences) total += s.tokens.size();
    return total;
}

std::size_t default_phoneme_count(std::string_view token_text) {
    if (token_text.empty()) return 1;
    std::size_t i = 0;
    const char32_t first = next_codepoint(token_text, i);
    if (is_cjk(first)) return 3;
    std::size_t count = 0;
    i = 0;
    while (i < token_text.size()) {
        const char32_t cp = next_codepoint(token_text, i);
        if (cp < 0x80) {
            if (std::isalnum(static_cast<unsigned char>(cp))) ++count;
        } else {
            ++count;
        }
    }
    return std::max<std::size_t>(1, count);
}

ParagraphDocument tokenize(std::string_view text, LanguageMode mode, std::string paragraph_id,
                           const PhonemeLexicon& lexicon) {
    if (trim_ws(text).empty()) throw InputError("tokenize: text is empty or whitespace-only");
    const PhonemeLexicon& lex =
        lexicon ? lexicon : PhonemeLexicon([](std::string_view t) { return default_phoneme_count(t); });

    std::vector<std::string_view> slices;
    std::size_t i = 0, start = 0;
    while (i < text.size()) {
        const char32_t cp = next_codepoint(text, i);
        if (!is_terminal(cp)) continue;
        while (i < text.size()) {
            std::size_t save = i;
            if (!is_closing_quote(next_codepoint(text, i))) {
                i = save;
                break;
            }
        }
        slices.push_back(text.substr(start, i - start));
        start = i;
    }
    if (start < text.size()) slices.push_back(text.substr(start));

    ParagraphDocument doc;
    doc.id = std::move(paragraph_id);
    for (std::string_view slice : slices) {
        const std::string_view trimmed = trim_ws(slice);
        if (trimmed.empty()) continue;
        std::vector<Token> tokens = tokenize_sentence(trimmed, mode, lex);
        if (tokens.empty()) continue; // punctuation-only fragment
        doc.sentences.push_back(Sentence{std::string(trimmed), std::move(tokens)});
    }
    if (doc.sentences.empty())
        throw InputError("tokenize: no tokens found in text");
    doc.validate();
    return doc;
}

void CorpusStats::validate() const {
    if (max_tokens_per_sentence == 0 || max_tokens_per_paragraph == 0 || max_sentences_per_paragraph == 0)
        throw ConfigError("corpus stats maxima must all be >= 1");
}

CorpusStats compute_corpus_stats(std::span<const ParagraphDocument> docs) {
    CorpusStats stats;
    for (const ParagraphDocument& doc : docs) {
        doc.validate();
        stats.max_tokens_per_paragraph = std::max<std::uint64_t>(stats.max_tokens_per_paragraph,
                                                                 doc.token_total());
        stats.max_sentences_per_paragraph = std::max<std::uint64_t>(stats.max_sentences_per_paragraph,
                                                                    doc.sentences.size());
        for (const Sentence& s : doc.sentences)
            stats.max_tokens_per_sentence = std::max<std::uint64_t>(stats.max_tokens_per_sentence,
                                                                    s.tokens.size());
    }
    return stats;
}

std::vector<std::vector<TokenStatFeatures>> token_stats(const ParagraphDocument& doc,
                                                        const CorpusStats& stats) {
    doc.validate();
    stats.validate();
    bool warned[3] = {false, false, false};
    auto ratio = [&](std::uint64_t count, std::uint64_t cap, int which, const char* label) {
        if (count > cap) {
            if (!warned[which]) {
                std::cerr << "warning: paragraph '" << doc.id << "' " << label << " " << count
                          << " exceeds corpus max " << cap << ", clamping feature to 1.0\n";
                warned[which] = true;
            }
            return 1.0;
        }
        return static_cast<double>(count) / static_cast<double>(cap);
    };

    const std::size_t total_tokens = doc.token_total();
    const std::size_t n_sentences = doc.sentences.size();
    std::vector<std::vector<TokenStatFeatures>> out(n_sentences);
    std::size_t paragraph_index = 0; // running 1-based token index within the paragraph
    for (std::size_t s = 0; s < n_sentences; ++s) {
        const std::size_t n_ks = doc.sentences[s].tokens.size();
        out[s].resize(n_ks);
        for (std::size_t k = 0; k < n_ks; ++k) {
            ++paragraph_index;
            TokenStatFeatures& f = out[s][k];
            f.f[0] = static_cast<double>(k + 1) / static_cast<double>(n_ks);
            f.f[1] = static_cast<double>(paragraph_index) / static_cast<double>(total_tokens);
            f.f[2] = static_cast<double>(s + 1) / static_cast<double>(n_sentences);
            f.f[3] = ratio(n_ks, stats.max_tokens_per_sentence, 0, "sentence token count");
            f.f[4] = ratio(total_tokens, stats.max_tokens_per_paragraph, 1, "paragraph token count");
            f.f[5] = ratio(n_sentences, stats.max_sentences_per_paragraph, 2, "sentence count");
        }
    }
    return out;
}

Tensor HashEmbeddingProvider::expand(std::string_view salt, std::string_view text) const {
    Rng rng(mix_seed(mix_seed(seed_, fnv1a64(salt)), fnv1a64(text)));
    std::vector<double> v(kTextEmbedDim);
    double norm_sq = 0.0;
    for (double& x : v) {
        x = rng.uniform(-1.0, 1.0);
        norm_sq += x * x;
    }
    const double inv = 1.0 / std::sqrt(norm_sq);
    for (double& x : v) x *= inv;
    return Tensor::from_vec({kTextEmbedDim}, std::move(v));
}

Tensor HashEmbeddingProvider::token_embedding(std::string_view token_text, std::string_view) const {
    return expand("tok", token_text);
}

Tensor HashEmbeddingProvider::sentence_embedding(std::string_view sentence_text) const {
    return expand("sent", sentence_text);
}

ImportedEmbeddingProvider ImportedEmbeddingProvider::from_file(const std::string& path) {
    return ImportedEmbeddingProvider(TensorContainer::load_file(path));
}

Tensor ImportedEmbeddingProvider::lookup(const std::string& key) const {
    if (!store_.contains(key)) throw ProviderError("no imported embedding under key '" + key + "'");
    return provider_vector(store_.get(key), "imported embedding '" + key + "'");
}

Tensor ImportedEmbeddingProvider::token_embedding(std::string_view token_text, std::string_view) const {
    return lookup("tok:" + sha1_hex(token_text));
}

Tensor ImportedEmbeddingProvider::sentence_embedding(std::string_view sentence_text) const {
    return lookup("sent:" + sha1_hex(sentence_text));
}

std::pair<std::size_t, std::size_t> context_window(std::size_t center, std::size_t n_sentences,
                                                   std::size_t window_size) {
    if (window_size == 0) throw ConfigError("context window size must be >= 1");
    if (center >= n_sentences)
        throw InputError("context window center " + std::to_string(center) + " out of range for " +
                         std::to_string(n_sentences) + " sentences");
    const std::size_t before = (window_size - 1) / 2;
    const std::size_t after = window_size - 1 - before;
    const std::size_t begin = center >= before ? center - before : 0;
    const std::size_t end = std::min(n_sentences, center + after + 1);
    return {begin, end};
}

Tensor gru_forward(const Tensor& xs, const GruWeights& w) {
    if (xs.rank() != 2) throw ShapeError("gru expects rank-2 input, got " + shape_str(xs.shape()));
    const std::size_t t_steps = xs.dim(0);
    if (t_steps == 0) throw ShapeError("gru needs at least one step");
    const std::size_t hidden = w.u_z.dim(1);
    Tensor h = Tensor::zeros({1, hidden});
    const Tensor ones = Tensor::full({1, hidden}, 1.0);
    for (std::size_t t = 0; t < t_steps; ++t) {
        Tensor x_t = slice(xs, 0, t, 1);
        Tensor z = sigmoid(broadcast_add(add(matmul(x_t, w.w_z), matmul(h, w.u_z)), w.b_z));
        Tensor r = sigmoid(broadcast_add(add(matmul(x_t, w.w_r), matmul(h, w.u_r)), w.b_r));
        Tensor cand = tanh_op(broadcast_add(add(matmul(x_t, w.w_h), matmul(mul(r, h), w.u_h)), w.b_h));
        h = add(mul(sub(ones, z), cand), mul(z, h));
    }
    return h;
}

Tensor token_context_embedding(const ParagraphDocument& doc, std::size_t sentence_idx,
                               const std::vector<std::vector<TokenStatFeatures>>& features,
                               const EmbeddingProvider& provider, const ContextEncoderWeights& w,
                               const ContextEncoderConfig& cfg) {
    doc.validate();
    if (sentence_idx >= doc.sentences.size())
        throw InputError("sentence index " + std::to_string(sentence_idx) + " out of range for " +
                         std::to_string(doc.sentences.size()) + " sentences");
    if (features.size() != doc.sentences.size() ||
        features[sentence_idx].size() != doc.sentences[sentence_idx].tokens.size())
        throw ContractError("token stat features are not aligned with the document");

    const Sentence& sent = doc.sentences[sentence_idx];
    const std::size_t n_tokens = sent.tokens.size();
    std::vector<double> rows(n_tokens * kTokenFeatureDim);
    std::vector<std::size_t> counts(n_tokens);
    for (std::size_t k = 0; k < n_tokens; ++k) {
        Tensor emb;
        try {
            emb = provider_vector(provider.token_embedding(sent.tokens[k].text, sent.text),
                                  "token embedding");
        } catch (const ProviderError& e) {
            throw ProviderError("sentence " + std::to_string(sentence_idx) + " token " +
                                std::to_string(k) + " ('" + sent.tokens[k].text + "'): " + e.what());
        }
        double* row = rows.data() + k * kTokenFeatureDim;
        std::copy(emb.data().begin(), emb.data().end(), row);
        for (std::size_t j = 0; j < kStatFeatureDim; ++j)
            row[kTextEmbedDim + j] = features[sentence_idx][k].f[j];
        counts[k] = sent.tokens[k].phoneme_count;
    }
    Tensor token_mat = Tensor::from_vec({n_tokens, kTokenFeatureDim}, std::move(rows));
    Tensor up = repeat_rows(token_mat, counts);
    Tensor h = relu(conv1d(up, w.token_conv_w, w.token_conv_b));
    h = layer_norm(h, w.token_ln.gamma, w.token_ln.beta);
    if (cfg.dropout_enabled) h = dropout(h, cfg.dropout_rate, mix_seed(cfg.dropout_seed, 1));
    return broadcast_add(matmul(h, w.token_proj_w), w.token_proj_b);
}

Tensor sentence_context_embedding(const ParagraphDocument& doc, std::size_t sentence_idx,
                                  const EmbeddingProvider& provider, const ContextEncoderWeights& w,
                                  const ContextEncoderConfig& cfg) {
    doc.validate();
    if (sentence_idx >= doc.sentences.size())
        throw InputError("sentence index " + std::to_string(sentence_idx) + " out of range for " +
                         std::to_string(doc.sentences.size()) + " sentences");
    const auto [begin, end] = context_window(sentence_idx, doc.sentences.size(), cfg.window_size);
    const std::size_t t_steps = end - begin;
    std::vector<double> rows(t_steps * kTextEmbedDim);
    for (std::size_t t = 0; t < t_steps; ++t) {
        Tensor emb;
        try {
            emb = provider_vector(provider.sentence_embedding(doc.sentences[begin + t].text),
                                  "sentence embedding");
        } catch (const ProviderError& e) {
            throw ProviderError("sentence " + std::to_string(begin + t) + ": " + e.what());
        }
        std::copy(emb.data().begin(), emb.data().end(), rows.data() + t * kTextEmbedDim);
    }
    Tensor window_mat = Tensor::from_vec({t_steps, kTextEmbedDim}, std::move(rows));
    Tensor projected = broadcast_add(matmul(window_mat, w.sent_in_w), w.sent_in_b);
    Tensor pcr = gru_forward(projected, w.gru);

    Tensor center_raw = provider_vector(provider.sentence_embedding(doc.sentences[sentence_idx].text),
                                        "sentence embedding");
    std::vector<double> center_data(center_raw.data().begin(), center_raw.data().end());
    Tensor center = Tensor::from_vec({1, kTextEmbedDim}, std::move(center_data));
    Tensor center_proj = broadcast_add(matmul(center, w.sent_in_w), w.sent_in_b);

    Tensor h = relu(concat({pcr, center_proj}, 1));
    if (cfg.dropout_enabled) h = dropout(h, cfg.dropout_rate, mix_seed(cfg.dropout_seed, 2));
    Tensor vec = broadcast_add(matmul(h, w.fuse_w), w.fuse_b); // [1 x 384]

    const std::size_t phonemes = doc.sentences[sentence_idx].phoneme_total();
    const std::size_t counts[1] = {phonemes};
    return repeat_rows(vec, counts);
}

Tensor fuse(const Tensor& phoneme_embeddings, const Tensor& token_ctx, const Tensor& sent_ctx) {
    for (const Tensor* t : {&phoneme_embeddings, &token_ctx, &sent_ctx})
        if (t->rank() != 2) throw ShapeError("fuse expects rank-2 inputs, got " + shape_str(t->shape()));
    if (phoneme_embeddings.dim(0) != token_ctx.dim(0) || phoneme_embeddings.dim(0) != sent_ctx.dim(0))
        throw AlignmentError("fuse length mismatch: phoneme embeddings " +
                             std::to_string(phoneme_embeddings.dim(0)) + " rows, token context " +
                             std::to_string(token_ctx.dim(0)) + ", sentence context " +
                             std::to_string(sent_ctx.dim(0)));
    return add(add(phoneme_embeddings, token_ctx), sent_ctx);
}

} // namespace ctxspeech

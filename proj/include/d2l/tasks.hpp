#pragma once

// Benchmark and data factories: synthetic needle-in-a-haystack, rule-based
// query generation, teacher self-responses and token packing.

#include "d2l/autograd.hpp"
#include "d2l/distill.hpp"
#include "d2l/target_lm.hpp"

#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace d2l {

inline constexpr std::string_view kNiahQuery = "What is the special magic number? Reply with only the number.";

std::string needle_sentence(std::string_view value);
// Deterministic subject-verb-object sentence over the shared vocabulary (no digits).
std::string distractor_sentence(Rng& rng);

struct NiahInstance {
    std::string haystack;
    std::string needle;  // the digit string
    int position = 0;    // character offset of the needle sentence
    std::string query;
    std::string answer;  // == needle
};

// haystack_len counts characters (= tokens); it is at least the needle sentence.
NiahInstance gen_niah_sample(Rng& rng, int haystack_len, int needle_digits = 4);
std::vector<NiahInstance> gen_niah_dataset(Rng& rng, int n_samples, int min_len = 32, int max_len = 256,
                                           int needle_digits = 4);
// The digits following "magic number is " in a haystack, or nullopt.
std::optional<std::string> recover_needle(std::string_view haystack);

// Teacher pretraining examples: teacher prompt followed by the answer, loss
// focused on the answer tokens.
std::vector<LmExample> niah_pretrain_corpus(Rng& rng, int n_samples, int min_len = 32, int max_len = 256);

// ---------------------------------------------------------------------------
// Prompt framing shared by teacher and student.

// BOS context "\n---\n" query "\n"
std::vector<int> teacher_prompt(std::string_view context, std::string_view query);
// BOS query "\n"
std::vector<int> student_prompt(std::string_view query);
// answer EOS
std::vector<int> response_tokens(std::string_view answer);

LmExample niah_example(const NiahInstance& inst);

// ---------------------------------------------------------------------------
// Query generation.

struct QueryTemplateSet {
    std::vector<std::string> templates;  // each contains exactly one "{input}"
    static QueryTemplateSet defaults();
    void validate() const;
    std::string apply(std::size_t index, std::string_view input) const;
};

struct GeneratedQuery {
    std::string query;     // template-wrapped question
    std::string span;      // grounding span, verbatim in the context
    std::string reference; // rule-derived answer; never used as a training target
};

struct QueryBatch {
    std::vector<GeneratedQuery> queries;
    bool short_context = false;  // fewer than requested could be produced
};

// Produces up to n queries over distinct spans in two rounds (n/2 then the
// rest), the second round excluding spans used by the first.
QueryBatch gen_queries(std::string_view context, int n, Rng& rng, const QueryTemplateSet& templates);

// Teacher answers the query with the context in its prompt; records the top-k
// logits at every response position. Returns nullopt for an empty generation.
std::optional<DistillSample> sample_self_response(const TinyLMParams& teacher, std::string_view context,
                                                  std::string_view query, int max_new, int k);

// ---------------------------------------------------------------------------
// Packing.

struct PackedBatch {
    std::vector<int> tokens;
    SequenceLayout layout;               // one segment per sample, block-diagonal causal attention
    std::vector<int> sample_ids;         // per segment
    int budget = 0;

    std::vector<std::vector<int>> unpack() const;
};

// First-fit packing in input order. Throws if any sample exceeds the budget.
std::vector<PackedBatch> pack_contexts(const std::vector<std::vector<int>>& samples, int token_budget);

// ---------------------------------------------------------------------------
// NIAH evaluation.

enum class AdapterSource { in_context, hypernet, fixed_adapter, prefix };

struct NiahEvalRow {
    int length = 0;
    int n = 0;
    int correct = 0;
    bool truncated_context = false;
    double accuracy() const { return n > 0 ? static_cast<double>(correct) / n : 0.0; }
};

// Maps a haystack to what the model should be run with; the query prompt is
// fixed. Exactly one of adapter / prefix may be set.
struct Internalized {
    std::optional<LoraAdapter> adapter;
    std::optional<PrefixKV> prefix;
};
using Internalizer = std::function<Internalized(const std::string& haystack)>;

struct NiahEvalOptions {
    std::vector<int> lengths;
    int n_per_length = 50;
    std::uint64_t seed = 1234;
    int max_new = 6;
    // Invoked with every prompt passed to the model.
    std::function<void(AdapterSource, std::span<const int>)> audit;
};

// Exact match after whitespace stripping. In-context mode truncates the
// haystack to the model budget and flags the row instead of failing.
std::vector<NiahEvalRow> eval_niah(const TinyLMParams& lm, AdapterSource source, const Internalizer& internalize,
                                   const NiahEvalOptions& opts);

std::string strip(std::string_view s);

}  // namespace d2l

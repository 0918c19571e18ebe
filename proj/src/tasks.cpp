#include "d2l/tasks.hpp"

#include "d2l/tokenizer.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <numeric>
#include <set>

namespace d2l {

namespace {

constexpr std::array kSubjects = {"the red fox",   "a tall man",     "the old dog",   "my sister",     "the small bird",
                                  "a quiet child", "the farmer",     "our teacher",   "the green frog", "a young cat",
                                  "the captain",   "her brother",    "the baker",     "a lazy horse",  "the king",
                                  "the sailor",    "a brown bear",   "the doctor",    "his friend",    "the painter"};
constexpr std::array kVerbs = {"sees",    "finds", "carries", "paints", "likes", "follows", "builds", "washes",
                               "watches", "holds", "moves",   "keeps",  "opens", "cleans",  "draws",  "takes"};
constexpr std::array kObjects = {"a wooden box",  "the blue door",   "an apple",       "the big river",
                                 "a long road",   "the white house", "a broken chair", "the garden",
                                 "a heavy stone", "the old bridge",  "a silver key",   "the morning bread",
                                 "a small boat",  "the dark forest", "a round table",  "the yellow flower"};
constexpr std::array kTails = {"", "", "", " every day", " in the rain", " near the hill", " at night", " with care",
                               " again", " before dinner"};

template <typename Arr>
const char* pick(Rng& rng, const Arr& a) {
    std::uniform_int_distribution<std::size_t> d(0, a.size() - 1);
    return a[d(rng)];
}

// Stream of distractor sentences truncated to exactly n characters.
std::string distractor_text(Rng& rng, int n) {
    std::string s;
    while (static_cast<int>(s.size()) < n) {
        if (!s.empty()) s += ' ';
        s += distractor_sentence(rng);
    }
    // Trim from the front so the text still ends on a full sentence.
    return s.substr(s.size() - static_cast<std::size_t>(std::max(0, n)));
}

}  // namespace

std::string needle_sentence(std::string_view value) {
    return "The special magic number is " + std::string(value) + ".";
}

std::string distractor_sentence(Rng& rng) {
    std::string s = std::string(pick(rng, kSubjects)) + " " + pick(rng, kVerbs) + " " + pick(rng, kObjects) +
                    pick(rng, kTails) + ".";
    s[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(s[0])));
    return s;
}

NiahInstance gen_niah_sample(Rng& rng, int haystack_len, int needle_digits) {
    if (needle_digits < 1 || needle_digits > 9) throw ConfigError("needle_digits must be in 1..9");
    std::uniform_int_distribution<int> digit(0, 9);
    std::string value;
    for (int i = 0; i < needle_digits; ++i) value += static_cast<char>('0' + digit(rng));
    const std::string needle = needle_sentence(value);
    const int n = static_cast<int>(needle.size());
    const int len = std::max(haystack_len, n);

    std::string hay;
    int at = 0;
    if (len == n) {
        hay = needle;
    } else {
        // Distractor text of len - n - 1 characters; the needle goes in at a
        // uniformly chosen sentence start (or the very end), one space apart.
        std::string d = distractor_text(rng, len - n - 1);
        std::vector<int> starts;
        if (!d.empty() && std::isupper(static_cast<unsigned char>(d[0]))) starts.push_back(0);
        for (std::size_t i = 1; i + 1 < d.size(); ++i) {
            if (d[i] == ' ' && d[i - 1] == '.') starts.push_back(static_cast<int>(i) + 1);
        }
        starts.push_back(static_cast<int>(d.size()));
        std::uniform_int_distribution<std::size_t> where(0, starts.size() - 1);
        at = starts[where(rng)];
        if (at == static_cast<int>(d.size())) {
            hay = d + " " + needle;
            at += 1;
        } else {
            hay = d.substr(0, static_cast<std::size_t>(at)) + needle + " " + d.substr(static_cast<std::size_t>(at));
        }
    }

    NiahInstance inst;
    inst.haystack = std::move(hay);
    inst.needle = value;
    inst.position = at;
    inst.query = std::string(kNiahQuery);
    inst.answer = value;
    return inst;
}

std::vector<NiahInstance> gen_niah_dataset(Rng& rng, int n_samples, int min_len, int max_len, int needle_digits) {
    if (n_samples < 0) throw ConfigError("n_samples must be >= 0");
    if (min_len > max_len) throw ConfigError("min_len must be <= max_len");
    std::uniform_int_distribution<int> len(min_len, max_len);
    std::vector<NiahInstance> out;
    out.reserve(static_cast<std::size_t>(n_samples));
    for (int i = 0; i < n_samples; ++i) out.push_back(gen_niah_sample(rng, len(rng), needle_digits));
    return out;
}

std::optional<std::string> recover_needle(std::string_view haystack) {
    constexpr std::string_view key = "magic number is ";
    const auto at = haystack.find(key);
    if (at == std::string_view::npos) return std::nullopt;
    std::string digits;
    for (std::size_t i = at + key.size(); i < haystack.size() && std::isdigit(static_cast<unsigned char>(haystack[i])); ++i) {
        digits += haystack[i];
    }
    if (digits.empty()) return std::nullopt;
    return digits;
}

// ---------------------------------------------------------------------------

std::vector<int> teacher_prompt(std::string_view context, std::string_view query) {
    const Tokenizer& tok = Tokenizer::instance();
    std::vector<int> ids{Tokenizer::kBos};
    auto add = [&](std::string_view s) {
        const auto e = tok.encode(s);
        ids.insert(ids.end(), e.begin(), e.end());
    };
    add(context);
    add("\n---\n");
    add(query);
    add("\n");
    return ids;
}

std::vector<int> student_prompt(std::string_view query) {
    const Tokenizer& tok = Tokenizer::instance();
    std::vector<int> ids{Tokenizer::kBos};
    const auto e = tok.encode(query);
    ids.insert(ids.end(), e.begin(), e.end());
    ids.push_back(tok.id_of('\n'));
    return ids;
}

std::vector<int> response_tokens(std::string_view answer) {
    std::vector<int> ids = Tokenizer::instance().encode(answer);
    ids.push_back(Tokenizer::kEos);
    return ids;
}

LmExample niah_example(const NiahInstance& inst) {
    LmExample ex;
    ex.tokens = teacher_prompt(inst.haystack, inst.query);
    ex.response_start = static_cast<int>(ex.tokens.size());
    const auto r = response_tokens(inst.answer);
    ex.tokens.insert(ex.tokens.end(), r.begin(), r.end());
    return ex;
}

std::vector<LmExample> niah_pretrain_corpus(Rng& rng, int n_samples, int min_len, int max_len) {
    std::vector<LmExample> out;
    for (const NiahInstance& inst : gen_niah_dataset(rng, n_samples, min_len, max_len)) out.push_back(niah_example(inst));
    return out;
}

// ---------------------------------------------------------------------------

QueryTemplateSet QueryTemplateSet::defaults() {
    return {{"What comes after \"{input}\"?", "Continue the text: {input}", "Repeat the sentence that starts with \"{input}\".",
             "Finish this: {input}"}};
}

void QueryTemplateSet::validate() const {
    if (templates.empty()) throw ConfigError("query templates: empty set");
    for (const auto& t : templates) {
        const auto first = t.find("{input}");
        if (first == std::string::npos || t.find("{input}", first + 1) != std::string::npos) {
            throw ConfigError("query template must contain exactly one {input}: " + t);
        }
    }
}

std::string QueryTemplateSet::apply(std::size_t index, std::string_view input) const {
    const std::string& t = templates.at(index);
    const auto at = t.find("{input}");
    return t.substr(0, at) + std::string(input) + t.substr(at + 7);
}

namespace {

struct Sentence {
    std::size_t begin, end;  // [begin, end) including the final '.'
};

std::vector<Sentence> split_sentences(std::string_view text) {
    std::vector<Sentence> out;
    std::size_t b = 0;
    while (b < text.size() && text[b] == ' ') ++b;
    for (std::size_t i = b; i < text.size(); ++i) {
        const char c = text[i];
        if (c == '.' || c == '?' || c == '!') {
            if (i > b) out.push_back({b, i + 1});
            b = i + 1;
            while (b < text.size() && text[b] == ' ') ++b;
            i = b == 0 ? 0 : b - 1;
        }
    }
    return out;
}

}  // namespace

QueryBatch gen_queries(std::string_view context, int n, Rng& rng, const QueryTemplateSet& templates) {
    templates.validate();
    if (n < 0) throw ConfigError("gen_queries: n must be >= 0");
    QueryBatch batch;
    // Candidate spans: sentences with at least four words; the prompt is the
    // first three words, the rule answer is the remainder.
    std::vector<Sentence> cands;
    for (const Sentence& s : split_sentences(context)) {
        const std::string_view body = context.substr(s.begin, s.end - s.begin);
        if (std::count(body.begin(), body.end(), ' ') >= 3) cands.push_back(s);
    }
    std::shuffle(cands.begin(), cands.end(), rng);
    std::set<std::size_t> used;
    std::uniform_int_distribution<std::size_t> tpl(0, templates.templates.size() - 1);
    const int rounds[2] = {n / 2, n - n / 2};
    std::size_t cursor = 0;
    for (int r = 0; r < 2; ++r) {
        for (int i = 0; i < rounds[r] && cursor < cands.size(); ++cursor) {
            const Sentence s = cands[cursor];
            if (!used.insert(s.begin).second) continue;
            const std::string body(context.substr(s.begin, s.end - s.begin));
            std::size_t cut = 0;
            for (int w = 0; w < 3; ++w) cut = body.find(' ', cut + 1);
            GeneratedQuery q;
            q.span = body;
            q.query = templates.apply(tpl(rng), body.substr(0, cut));
            q.reference = body.substr(cut + 1);
            batch.queries.push_back(std::move(q));
            ++i;
        }
    }
    batch.short_context = static_cast<int>(batch.queries.size()) < n;
    return batch;
}

std::optional<DistillSample> sample_self_response(const TinyLMParams& teacher, std::string_view context,
                                                  std::string_view query, int max_new, int k) {
    const std::vector<int> prompt = teacher_prompt(context, query);
    GenerateOptions go;
    go.max_new = max_new;
    std::vector<int> gen = generate(teacher, prompt, go);
    if (gen.empty()) return std::nullopt;
    DistillSample s;
    s.context = Tokenizer::instance().encode(context);
    s.query = Tokenizer::instance().encode(query);
    s.response = gen;
    // Keep EOS as the final target when the model stopped on its own.
    if (static_cast<int>(gen.size()) < max_new) s.response.push_back(Tokenizer::kEos);
    std::vector<int> seq = prompt;
    seq.insert(seq.end(), s.response.begin(), s.response.end());
    seq.pop_back();
    const Matrix logits = forward_with_activations(teacher, seq).logits;
    const int first = static_cast<int>(prompt.size()) - 1;
    s.targets = topk_targets(logits.middleRows(first, static_cast<Eigen::Index>(s.response.size())), k);
    s.targets.response = s.response;
    s.teacher_generated = true;
    return s;
}

// ---------------------------------------------------------------------------

std::vector<std::vector<int>> PackedBatch::unpack() const {
    std::vector<std::vector<int>> out;
    for (const Segment& s : layout.segments) {
        out.emplace_back(tokens.begin() + s.start, tokens.begin() + s.start + s.length);
    }
    return out;
}

std::vector<PackedBatch> pack_contexts(const std::vector<std::vector<int>>& samples, int token_budget) {
    if (token_budget <= 0) throw ConfigError("pack_contexts: budget must be positive");
    std::vector<PackedBatch> bins;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const int n = static_cast<int>(samples[i].size());
        if (n > token_budget) {
            throw ShapeError("pack_contexts: sample " + std::to_string(i) + " has " + std::to_string(n) +
                             " tokens, budget is " + std::to_string(token_budget));
        }
        PackedBatch* dst = nullptr;
        for (PackedBatch& b : bins) {
            if (b.layout.total + n <= token_budget) {
                dst = &b;
                break;
            }
        }
        if (!dst) {
            bins.emplace_back();
            dst = &bins.back();
            dst->budget = token_budget;
        }
        dst->layout.segments.push_back({dst->layout.total, n, 0, -1});
        dst->layout.total += n;
        dst->tokens.insert(dst->tokens.end(), samples[i].begin(), samples[i].end());
        dst->sample_ids.push_back(static_cast<int>(i));
    }
    return bins;
}

// ---------------------------------------------------------------------------

std::string strip(std::string_view s) {
    std::size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return std::string(s.substr(b, e - b));
}

std::vector<NiahEvalRow> eval_niah(const TinyLMParams& lm, AdapterSource source, const Internalizer& internalize,
                                   const NiahEvalOptions& opts) {
    const Tokenizer& tok = Tokenizer::instance();
    std::vector<NiahEvalRow> rows;
    for (int len : opts.lengths) {
        Rng rng(opts.seed ^ (0x51ed27ull * static_cast<std::uint64_t>(len + 1)));
        NiahEvalRow row;
        row.length = len;
        for (int i = 0; i < opts.n_per_length; ++i) {
            const NiahInstance inst = gen_niah_sample(rng, len);
            std::vector<int> prompt;
            GenerateOptions go;
            go.max_new = opts.max_new;
            Internalized in;
            if (source == AdapterSource::in_context) {
                std::string hay = inst.haystack;
                const int overhead = static_cast<int>(teacher_prompt("", inst.query).size()) + opts.max_new;
                const int room = lm.config.max_seq_len - overhead;
                if (static_cast<int>(hay.size()) > room) {
                    // Keep the tail that fits; the needle may be lost.
                    hay = hay.substr(hay.size() - static_cast<std::size_t>(room));
                    row.truncated_context = true;
                }
                prompt = teacher_prompt(hay, inst.query);
            } else {
                if (!internalize) throw ConfigError("eval_niah: internalizer required for this source");
                in = internalize(inst.haystack);
                if (in.adapter && in.prefix) throw ConfigError("eval_niah: both adapter and prefix supplied");
                if (in.adapter) go.adapter = &*in.adapter;
                if (in.prefix) go.prefix = &*in.prefix;
                prompt = student_prompt(inst.query);
            }
            if (opts.audit) opts.audit(source, prompt);
            const std::vector<int> out = generate(lm, prompt, go);
            row.correct += strip(tok.decode(out)) == inst.answer ? 1 : 0;
            ++row.n;
        }
        rows.push_back(row);
    }
    return rows;
}

}  // namespace d2l

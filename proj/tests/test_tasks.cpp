#include "support.hpp"

#include <array>
#include <set>

using namespace d2l;
using namespace d2l::test;

TEST_CASE("needle digits are uniform") {
    Rng rng(1);
    std::array<std::array<int, 10>, 4> counts{};
    const int n = 5000;
    for (int i = 0; i < n; ++i) {
        const NiahInstance s = gen_niah_sample(rng, 64, 4);
        REQUIRE(s.needle.size() == 4u);
        for (int p = 0; p < 4; ++p) ++counts[static_cast<std::size_t>(p)][static_cast<std::size_t>(s.needle[static_cast<std::size_t>(p)] - '0')];
    }
    for (const auto& pos : counts) {
        double chi2 = 0.0;
        for (int c : pos) chi2 += (c - n / 10.0) * (c - n / 10.0) / (n / 10.0);
        // 9 degrees of freedom; 27.9 is the 0.999 quantile.
        CHECK(chi2 < 27.9);
    }
}

TEST_CASE("haystacks have the exact length and one recoverable needle at a sentence start") {
    Rng rng(2);
    const int needle_len = static_cast<int>(needle_sentence("1234").size());
    for (int len : {needle_len, needle_len + 1, needle_len + 2, 50, 64, 257, 1000, 4096}) {
        for (int trial = 0; trial < 20; ++trial) {
            const NiahInstance s = gen_niah_sample(rng, len, 4);
            CHECK(static_cast<int>(s.haystack.size()) == len);
            CHECK(recover_needle(s.haystack) == s.needle);
            CHECK(s.haystack.substr(static_cast<std::size_t>(s.position), static_cast<std::size_t>(needle_len)) == needle_sentence(s.needle));
            const auto at = static_cast<std::size_t>(s.position);
            CHECK((at == 0 || (s.haystack[at - 1] == ' ' && (at == 1 || s.haystack[at - 2] == '.'))));
            int digits = 0;
            for (char ch : s.haystack) digits += std::isdigit(static_cast<unsigned char>(ch)) ? 1 : 0;
            CHECK(digits == 4);
            CHECK_NOTHROW(Tokenizer::instance().encode(s.haystack));
        }
    }
    CHECK(static_cast<int>(gen_niah_sample(rng, 5, 4).haystack.size()) == needle_len);
    CHECK_THROWS_AS(gen_niah_sample(rng, 64, 0), ConfigError);
}

TEST_CASE("needle positions cover the haystack") {
    Rng rng(3);
    int early = 0, late = 0;
    for (int i = 0; i < 400; ++i) {
        const NiahInstance s = gen_niah_sample(rng, 400, 4);
        if (s.position < 100) ++early;
        if (s.position > 300) ++late;
    }
    CHECK(early > 40);
    CHECK(late > 40);
}

TEST_CASE("dataset generation is deterministic and respects length bounds") {
    Rng a(4), b(4);
    const auto x = gen_niah_dataset(a, 50, 32, 256);
    const auto y = gen_niah_dataset(b, 50, 32, 256);
    REQUIRE(x.size() == 50u);
    for (std::size_t i = 0; i < x.size(); ++i) {
        CHECK(x[i].haystack == y[i].haystack);
        CHECK(x[i].haystack.size() >= 32u);
        CHECK(x[i].haystack.size() <= 256u);
    }
    CHECK_FALSE(recover_needle("nothing to see here").has_value());
}

TEST_CASE("prompt framing") {
    const Tokenizer& tok = Tokenizer::instance();
    const auto t = teacher_prompt("ctx", "q?");
    CHECK(t.front() == Tokenizer::kBos);
    CHECK(tok.decode(t) == "ctx\n---\nq?\n");
    CHECK(tok.decode(student_prompt("q?")) == "q?\n");
    const auto r = response_tokens("12");
    CHECK(r.back() == Tokenizer::kEos);
    CHECK(r.size() == 3u);
    Rng rng(5);
    const NiahInstance inst = gen_niah_sample(rng, 80, 4);
    const LmExample e = niah_example(inst);
    CHECK(e.response_start == static_cast<int>(teacher_prompt(inst.haystack, inst.query).size()));
    CHECK(e.tokens.back() == Tokenizer::kEos);
}

TEST_CASE("tokenizer round trip and rejection") {
    const Tokenizer& tok = Tokenizer::instance();
    CHECK(tok.vocab_size() == 78);
    const std::string s = "The special magic number is 0420. (ok)\n";
    CHECK(tok.decode(tok.encode(s)) == s);
    CHECK_THROWS_AS(tok.encode("caf\xc3\xa9"), Error);
    CHECK(tok.is_digit_token(tok.id_of('7')));
    CHECK_FALSE(tok.is_digit_token(tok.id_of('a')));
}

TEST_CASE("generated queries use distinct verbatim spans and fill their template") {
    Rng rng(6);
    std::string ctx;
    for (int i = 0; i < 30; ++i) ctx += distractor_sentence(rng) + " ";
    const QueryTemplateSet t = QueryTemplateSet::defaults();
    const QueryBatch qb = gen_queries(ctx, 10, rng, t);
    CHECK(qb.queries.size() == 10u);
    CHECK_FALSE(qb.short_context);
    std::set<std::string> spans;
    for (const auto& q : qb.queries) {
        CHECK(ctx.find(q.span) != std::string::npos);
        const std::string lead = q.span.substr(0, q.span.find(' '));
        CHECK(q.query.find(lead) != std::string::npos);
        CHECK(q.span.find(q.reference) != std::string::npos);
        CHECK(q.query.find("{input}") == std::string::npos);
        spans.insert(q.span);
    }
    CHECK(spans.size() == qb.queries.size());
    const QueryBatch few = gen_queries("Too short.", 10, rng, t);
    CHECK(few.short_context);
    QueryTemplateSet bad;
    bad.templates = {"no placeholder"};
    CHECK_THROWS(bad.validate());
}

TEST_CASE("first-fit packing preserves samples and budgets") {
    Rng rng(7);
    std::vector<std::vector<int>> samples;
    std::uniform_int_distribution<int> len(1, 60);
    for (int i = 0; i < 40; ++i) samples.push_back(random_tokens(rng, len(rng)));
    const auto packs = pack_contexts(samples, 100);
    std::vector<int> seen(samples.size(), 0);
    for (const auto& p : packs) {
        CHECK(static_cast<int>(p.tokens.size()) <= 100);
        p.layout.check();
        const auto parts = p.unpack();
        for (std::size_t k = 0; k < parts.size(); ++k) {
            CHECK(parts[k] == samples[static_cast<std::size_t>(p.sample_ids[k])]);
            ++seen[static_cast<std::size_t>(p.sample_ids[k])];
        }
    }
    for (int s : seen) CHECK(s == 1);
    CHECK_THROWS(pack_contexts({std::vector<int>(101, 3)}, 100));
}

TEST_CASE("packed forward equals separate forwards") {
    const TinyLMParams lm = random_lm(micro_lm(), 8);
    Rng rng(8);
    std::vector<std::vector<int>> samples;
    for (int n : {5, 9, 3}) samples.push_back(random_tokens(rng, n));
    const auto packs = pack_contexts(samples, 64);
    REQUIRE(packs.size() == 1u);
    Tape t(false);
    LmGraph g = bind_lm(t, lm, nullptr);
    const Matrix packed = lm_graph_forward(t, g, packs[0].tokens, packs[0].layout, {}).logits.value();
    for (std::size_t k = 0; k < samples.size(); ++k) {
        const Segment& s = packs[0].layout.segments[k];
        const Matrix alone = forward_with_activations(lm, samples[static_cast<std::size_t>(packs[0].sample_ids[k])]).logits;
        CHECK(max_abs_diff(packed.middleRows(s.start, s.length), alone) < 1e-5f);
    }
}

TEST_CASE("in-context evaluation audits prompts and flags truncation") {
    LMConfig c = micro_lm();
    c.max_seq_len = 200;
    const TinyLMParams lm = random_lm(c, 9);
    NiahEvalOptions o;
    o.lengths = {64, 400};
    o.n_per_length = 3;
    int prompts = 0;
    int longest = 0;
    o.audit = [&](AdapterSource src, std::span<const int> p) {
        CHECK(src == AdapterSource::in_context);
        ++prompts;
        longest = std::max(longest, static_cast<int>(p.size()));
    };
    const auto rows = eval_niah(lm, AdapterSource::in_context, {}, o);
    REQUIRE(rows.size() == 2u);
    CHECK_FALSE(rows[0].truncated_context);
    CHECK(rows[1].truncated_context);
    CHECK(rows[0].n == 3);
    CHECK(prompts == 6);
    CHECK(longest + o.max_new <= c.max_seq_len);
}

TEST_CASE("internalized evaluation never passes the haystack") {
    const TinyLMParams lm = random_lm(micro_lm(), 10);
    const int q = static_cast<int>(student_prompt(kNiahQuery).size());
    NiahEvalOptions o;
    o.lengths = {100};
    o.n_per_length = 2;
    int calls = 0;
    o.audit = [&](AdapterSource, std::span<const int> p) { CHECK(static_cast<int>(p.size()) == q); };
    Internalizer f = [&](const std::string& hay) {
        ++calls;
        CHECK(hay.size() == 100u);
        Internalized in;
        in.adapter = init_cd_adapter(lm.config, CdOptions{});
        return in;
    };
    const auto rows = eval_niah(lm, AdapterSource::hypernet, f, o);
    CHECK(calls == 2);
    CHECK(rows[0].n == 2);
    CHECK(strip("  12 \n") == "12");
}

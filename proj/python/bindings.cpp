#include "d2l/adapters.hpp"
#include "d2l/checkpoint.hpp"
#include "d2l/distill.hpp"
#include "d2l/harness.hpp"
#include "d2l/hypernet.hpp"
#include "d2l/target_lm.hpp"
#include "d2l/tasks.hpp"
#include "d2l/tokenizer.hpp"

#include <pybind11/eigen.h>
#include <pybind11/functional.h>
#include <pybind11/operators.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

namespace py = pybind11;
using namespace d2l;

namespace {

// Configs cross the boundary as JSON text so Python sees plain dicts.
py::object to_py(const nlohmann::json& j) {
    return py::module_::import("json").attr("loads")(j.dump());
}

nlohmann::json from_py(const py::object& o) {
    return nlohmann::json::parse(py::module_::import("json").attr("dumps")(o).cast<std::string>());
}

ExperimentConfig experiment(const py::object& cfg) {
    return parse_experiment(cfg.is_none() ? nlohmann::json::object() : from_py(cfg));
}

py::dict niah_dict(const NiahInstance& s) {
    py::dict d;
    d["haystack"] = s.haystack;
    d["needle"] = s.needle;
    d["position"] = s.position;
    d["query"] = s.query;
    d["answer"] = s.answer;
    return d;
}

py::list rows_list(const std::vector<MetricsRow>& rows) { return to_py(metrics_json(rows)); }

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Hypernetwork context internalization on a tiny character LM";

    // Later registrations are tried first, so the base class goes first.
    py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
    py::register_exception<FormatError>(m, "FormatError", PyExc_IOError);
    py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
    py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);

    m.def("encode", [](const std::string& s) { return Tokenizer::instance().encode(s); });
    m.def("decode", [](const std::vector<int>& ids) { return Tokenizer::instance().decode(ids); });
    m.attr("vocab_size") = Tokenizer::instance().vocab_size();
    m.attr("niah_query") = std::string(kNiahQuery);

    py::class_<LoraLayerDelta>(m, "LoraLayerDelta")
        .def_readonly("a", &LoraLayerDelta::a)
        .def_readonly("b", &LoraLayerDelta::b)
        .def_readonly("alpha", &LoraLayerDelta::alpha)
        .def_property_readonly("rank", &LoraLayerDelta::rank)
        .def("effective_delta", &LoraLayerDelta::effective_delta);

    py::class_<LoraAdapter>(m, "LoraAdapter")
        .def_readonly("layers", &LoraAdapter::layers)
        .def_readonly("chunk_rank", &LoraAdapter::chunk_rank)
        .def_readonly("n_chunks", &LoraAdapter::n_chunks)
        .def_property_readonly("total_rank", &LoraAdapter::total_rank)
        .def("save", [](const LoraAdapter& a, const std::string& p) { save_adapter(p, a); })
        .def("to_bytes", [](const LoraAdapter& a) {
            const auto b = serialize_adapter(a);
            return py::bytes(reinterpret_cast<const char*>(b.data()), b.size());
        })
        .def(py::self == py::self);
    m.def("load_adapter", &load_adapter);
    m.def("adapter_from_bytes", [](const py::bytes& b) {
        const std::string s = b;
        return deserialize_adapter(std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
    });
    m.def("compose_adapters", [](const std::vector<LoraAdapter>& parts) { return compose_adapters(parts); });

    py::class_<PrefixKV>(m, "PrefixKV")
        .def_readonly("keys", &PrefixKV::keys)
        .def_readonly("values", &PrefixKV::values)
        .def_property_readonly("n_prefix", &PrefixKV::n_prefix);

    py::class_<TinyLMParams>(m, "TinyLM")
        .def_property_readonly("config", [](const TinyLMParams& p) { return to_py(nlohmann::json(p.config)); })
        .def_property_readonly("checksum", &TinyLMParams::checksum)
        .def_property_readonly("parameter_count", &TinyLMParams::parameter_count)
        .def("save", [](const TinyLMParams& p, const std::string& path) { save_lm(path, p); })
        .def(
            "logits",
            [](const TinyLMParams& p, const std::vector<int>& tokens, const LoraAdapter* adapter, const PrefixKV* prefix) {
                return forward_with_activations(p, tokens, {}, adapter, prefix).logits;
            },
            py::arg("tokens"), py::arg("adapter") = nullptr, py::arg("prefix") = nullptr)
        .def(
            "generate",
            [](const TinyLMParams& p, const std::vector<int>& prompt, int max_new, const LoraAdapter* adapter,
               const PrefixKV* prefix) {
                GenerateOptions o;
                o.max_new = max_new;
                o.adapter = adapter;
                o.prefix = prefix;
                return generate(p, prompt, o);
            },
            py::arg("prompt"), py::arg("max_new") = 8, py::arg("adapter") = nullptr, py::arg("prefix") = nullptr);
    m.def(
        "init_lm",
        [](const py::object& cfg, std::uint64_t seed) {
            LMConfig c;
            if (!cfg.is_none()) c = from_py(cfg).get<LMConfig>();
            return init_lm(c, seed);
        },
        py::arg("config") = py::none(), py::arg("seed") = 0);
    m.def("load_lm", &load_lm);

    py::class_<HypernetParams>(m, "Hypernet")
        .def_property_readonly("config", [](const HypernetParams& h) { return to_py(nlohmann::json(h.config)); })
        .def_property_readonly("parameter_count", &HypernetParams::parameter_count)
        .def("save", [](const HypernetParams& h, const std::string& path) { save_hypernet(path, h); })
        .def(
            "internalize",
            [](const HypernetParams& h, const TinyLMParams& lm, const std::string& context, const std::string& mode) {
                return internalize(h, lm, Tokenizer::instance().encode(context), generation_mode_from_string(mode));
            },
            py::arg("lm"), py::arg("context"), py::arg("mode") = "batched")
        .def(
            "internalize_prefix",
            [](const HypernetParams& h, const TinyLMParams& lm, const std::string& context, const std::string& mode) {
                return internalize_prefix(h, lm, Tokenizer::instance().encode(context), generation_mode_from_string(mode));
            },
            py::arg("lm"), py::arg("context"), py::arg("mode") = "batched");
    m.def(
        "init_hypernet",
        [](const py::object& cfg, const TinyLMParams& lm, std::uint64_t seed) {
            HypernetConfig c;
            if (!cfg.is_none()) c = from_py(cfg).get<HypernetConfig>();
            return init_hypernet(c, lm.config, seed);
        },
        py::arg("config") = py::none(), py::arg("lm"), py::arg("seed") = 0);
    m.def("load_hypernet", [](const std::string& p) { return load_hypernet(p).params; });

    m.def("chunk_sizes", [](int n, int max_chunk) { return chunk_context(n, max_chunk).sizes; });
    m.def(
        "niah_sample",
        [](int length, std::uint64_t seed, int digits) {
            Rng rng(seed);
            return niah_dict(gen_niah_sample(rng, length, digits));
        },
        py::arg("length"), py::arg("seed") = 0, py::arg("digits") = 4);
    m.def("teacher_prompt", [](const std::string& c, const std::string& q) { return teacher_prompt(c, q); });
    m.def("student_prompt", [](const std::string& q) { return student_prompt(q); });

    m.def(
        "kl_loss", [](const Matrix& teacher, const Matrix& student, int k) { return kl_loss(topk_targets(teacher, k), student); },
        py::arg("teacher_logits"), py::arg("student_logits"), py::arg("k") = 16);
    m.def("ce_loss", [](const Matrix& logits, const std::vector<int>& gold) { return ce_loss(logits, gold); });
    m.def("kv_cache_footprint", [](std::uint64_t ctx, std::uint64_t gen, const py::object& cfg, std::uint64_t bytes) {
        LMConfig c;
        if (!cfg.is_none()) c = from_py(cfg).get<LMConfig>();
        return kv_cache_footprint(ctx, gen, c, bytes);
    });

    m.def("default_config", [] { return to_py(nlohmann::json(ExperimentConfig{})); });
    m.def("validate_config", [](const py::object& cfg) { return to_py(nlohmann::json(experiment(cfg))); });
    m.def("pretrain_lm", [](const py::object& cfg) { return cmd_pretrain_lm(experiment(cfg)).params; });
    m.def("gen_data", [](const py::object& cfg) {
        const GenDataResult r = cmd_gen_data(experiment(cfg));
        py::dict d;
        d["count"] = r.count;
        d["teacher_mismatches"] = r.teacher_mismatches;
        d["file_hash"] = r.file_hash;
        return d;
    });
    m.def("meta_train", [](const py::object& cfg) { return cmd_meta_train(experiment(cfg)).params; });
    m.def("cd_baseline", [](const py::object& cfg) { return rows_list(cmd_cd_baseline(experiment(cfg))); });
    m.def("evaluate", [](const py::object& cfg) { return rows_list(cmd_eval(experiment(cfg))); });
    m.def("report", [](const std::vector<std::string>& runs, const std::string& out) { return rows_list(cmd_report(runs, out)); });
}

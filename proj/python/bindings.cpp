#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "cstransfer/errors.hpp"
#include "cstransfer/pipeline.hpp"

namespace py = pybind11;
using namespace cstransfer;

namespace {

RunConfig config_from(const std::string& text) {
    return text.empty() ? default_run_config() : parse_run_config(text, "config");
}

const std::vector<ParallelPair>& split_named(const Corpus& c, const std::string& split) {
    if (split == "train") return c.train;
    if (split == "dev") return c.dev;
    if (split == "test") return c.test;
    if (split == "parallel") return c.parallel;
    throw ConfigError("unknown split '" + split + "'");
}

py::list pairs_to_list(const std::vector<ParallelPair>& pairs) {
    py::list out;
    for (const auto& p : pairs) out.append(py::make_tuple(p.source, p.target));
    return out;
}

py::dict row_dict(const LogRow& r) {
    py::dict d;
    d["step"] = r.step;
    d["lr"] = r.lr;
    d["ce"] = r.ce;
    d["align"] = r.align;
    d["diff"] = r.diff;
    d["nc"] = r.nc;
    d["total"] = r.total;
    d["dev_acc_src"] = r.dev_acc_src ? py::cast(*r.dev_acc_src) : py::none();
    d["dev_acc_tgt"] = r.dev_acc_tgt ? py::cast(*r.dev_acc_tgt) : py::none();
    return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "cstransfer C++ core";

    py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
    py::register_exception<DataError>(m, "DataError", PyExc_RuntimeError);
    py::register_exception<FormatError>(m, "FormatError", PyExc_RuntimeError);
    py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);
    py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);

    py::class_<Example>(m, "Example")
        .def(py::init<>())
        .def_readwrite("id", &Example::id)
        .def_readwrite("lang", &Example::lang)
        .def_readwrite("question", &Example::question)
        .def_readwrite("choices", &Example::choices)
        .def_readwrite("gold", &Example::gold)
        .def("__eq__", [](const Example& a, const Example& b) { return a == b; })
        .def("__repr__", [](const Example& e) { return "<Example " + e.id + " " + e.lang + ">"; });

    py::class_<Corpus>(m, "Corpus")
        .def_property_readonly("train", [](const Corpus& c) { return pairs_to_list(c.train); })
        .def_property_readonly("dev", [](const Corpus& c) { return pairs_to_list(c.dev); })
        .def_property_readonly("test", [](const Corpus& c) { return pairs_to_list(c.test); })
        .def_property_readonly("parallel", [](const Corpus& c) { return pairs_to_list(c.parallel); })
        .def_property_readonly("vocab", [](const Corpus& c) { return c.vocab.tokens(); })
        .def("write", [](const Corpus& c, const std::filesystem::path& dir) { write_corpus(c, dir); })
        .def_static("read", [](const std::filesystem::path& dir) { return read_corpus(dir); });

    py::class_<Checkpoint>(m, "Checkpoint")
        .def_static("load", [](const std::filesystem::path& p) { return load_checkpoint(p); })
        .def("save", [](const Checkpoint& cp, const std::filesystem::path& p) { save_checkpoint(cp, p); })
        .def_property_readonly("stage", [](const Checkpoint& cp) { return cp.stage; })
        .def_property_readonly("global_step", [](const Checkpoint& cp) { return cp.global_step; })
        .def_property_readonly("stage_step", [](const Checkpoint& cp) { return cp.stage_step; })
        .def_property_readonly("vocab_size", [](const Checkpoint& cp) { return cp.vocab.size(); })
        .def_property_readonly("config_json", [](const Checkpoint& cp) { return cp.config_json; })
        .def_property_readonly("parameter_count",
                               [](const Checkpoint& cp) {
                                   std::size_t n = 0;
                                   for (const auto& [name, t] : cp.model.parameters()) n += t.numel();
                                   return n;
                               })
        .def("digest", [](const Checkpoint& cp) { return checkpoint_digest(cp); });

    m.def("default_config_json", [] { return run_config_json(default_run_config()); });

    m.def(
        "generate_corpus",
        [](const std::string& config, std::int64_t seed) {
            RunConfig c = config_from(config);
            if (seed >= 0) c.world.seed = static_cast<std::uint64_t>(seed);
            py::gil_scoped_release release;
            return corpus_from_world(generate_synthetic_world(c.world));
        },
        py::arg("config"), py::arg("seed"));

    m.def(
        "initial_checkpoint",
        [](const Corpus& corpus, const std::string& config) {
            const RunConfig c = config_from(config);
            Checkpoint cp = initial_checkpoint(c.encoder_config(), c.head_config(), corpus.vocab);
            cp.config_json = run_config_json(c);
            return cp;
        },
        py::arg("corpus"), py::arg("config"));

    m.def(
        "train_stage",
        [](const Checkpoint& cp, const Corpus& corpus, int stage, const std::string& config, const std::string& losses,
           std::int64_t steps) {
            RunConfig c = config_from(config);
            if (!losses.empty()) c.losses = losses;
            c.validate();
            TrainConfig tc = c.stage_config(stage);
            if (steps >= 0) {
                tc.total_steps = static_cast<std::size_t>(steps);
                tc.warmup_steps = std::min(tc.warmup_steps, tc.total_steps);
            }
            StageResult r;
            {
                py::gil_scoped_release release;
                if (stage == 1) {
                    r = run_stage1(cp, tc, mixed_pool(corpus.train), corpus.dev);
                } else if (stage == 2) {
                    r = run_stage2(cp, tc, corpus.parallel, corpus.dev);
                } else {
                    r = run_stage3(cp, tc, corpus.train, corpus.dev);
                }
            }
            py::list log;
            for (const auto& row : r.log) log.append(row_dict(row));
            return py::make_tuple(std::move(r.checkpoint), log);
        },
        py::arg("checkpoint"), py::arg("corpus"), py::arg("stage"), py::arg("config"), py::arg("losses"),
        py::arg("steps"));

    m.def(
        "evaluate",
        [](const Checkpoint& cp, const Corpus& corpus, const std::string& split, const std::string& lang,
           const std::string& mode, const std::string& fmt) {
            const auto& pairs = split_named(corpus, split);
            std::vector<Example> items;
            if (lang == kSourceLang) {
                items = source_side(pairs);
            } else if (lang == kTargetLang) {
                items = target_side(pairs);
            } else {
                throw ConfigError("unknown language '" + lang + "'");
            }
            InputFormat format = stage_format(static_cast<int>(cp.stage));
            if (fmt == "statement") {
                format = InputFormat::Statement;
            } else if (fmt == "qa") {
                format = InputFormat::QA;
            } else if (fmt != "auto") {
                throw ConfigError("unknown input format '" + fmt + "'");
            }
            const auto m = parse_input_mode(mode);
            py::gil_scoped_release release;
            return report_json(evaluate(cp, items, m, format, split + "_" + lang));
        });

    m.def("run_pipeline", [](const Corpus& corpus, const std::string& config, const std::string& out_dir) {
        const RunConfig c = config_from(config);
        PipelineOptions opts;
        if (!out_dir.empty()) opts.out_dir = out_dir;
        py::gil_scoped_release release;
        return pipeline_summary_json(c, run_pipeline(c, corpus, opts));
    });

    m.def(
        "scheduled_lr",
        [](double base_lr, std::size_t step, std::size_t warmup, std::size_t total) {
            TrainConfig c;
            c.learning_rate = base_lr;
            c.warmup_steps = warmup;
            c.total_steps = total;
            return scheduled_lr(c, step);
        },
        py::arg("base_lr"), py::arg("step"), py::arg("warmup"), py::arg("total"));
    m.def("rounded_accuracy", &rounded_accuracy, py::arg("correct"), py::arg("count"));
    m.def("format_delta", &format_delta, py::arg("delta"));
}

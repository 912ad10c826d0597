#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "turnlm/assembly.hpp"
#include "turnlm/checkpoint.hpp"
#include "turnlm/corpus.hpp"
#include "turnlm/decoding.hpp"
#include "turnlm/errors.hpp"
#include "turnlm/keyvalue.hpp"
#include "turnlm/metrics.hpp"
#include "turnlm/model.hpp"
#include "turnlm/training.hpp"

namespace py = pybind11;
using namespace turnlm;

namespace {

using TurnPairs = std::vector<std::pair<std::string, std::string>>;

Conversation to_conversation(const TurnPairs& turns, const std::string& id = "py") {
    Conversation c{id, {}};
    for (const auto& [speaker, text] : turns) c.turns.push_back(Turn{speaker_from_string(speaker), text});
    return c;
}

TurnPairs to_pairs(const Conversation& c) {
    TurnPairs out;
    for (const auto& t : c.turns) out.emplace_back(std::string(to_string(t.speaker)), t.text);
    return out;
}

py::dict sequence_dict(const AssembledSequence& seq) {
    py::dict d;
    d["ids"] = seq.token_ids;
    d["types"] = seq.token_types;
    d["positions"] = seq.positions;
    return d;
}

py::dict report_dict(const MetricReport& r) {
    py::dict d;
    d["bleu1"] = r.bleu1;
    d["bleu2"] = r.bleu2;
    d["rouge2"] = r.rouge2;
    d["rougeL"] = r.rougeL;
    d["distinct1"] = r.distinct1;
    d["distinct2"] = r.distinct2;
    d["meteor_lite"] = r.meteor_lite;
    d["pairs"] = r.pairs;
    return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Dialogue language model with speaker token-type embeddings";

    py::register_exception<ContractError>(m, "ContractError", PyExc_ValueError);
    py::register_exception<ParseError>(m, "ParseError", PyExc_ValueError);
    py::register_exception<NormalizationError>(m, "NormalizationError", PyExc_ValueError);
    py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);
    py::register_exception<CapacityError>(m, "CapacityError", PyExc_OverflowError);

    m.def("tokenize", &tokenize, py::arg("text"));

    py::class_<Vocabulary>(m, "Vocabulary")
        .def(py::init<std::vector<std::string>>(), py::arg("tokens"))
        .def_static("load", &Vocabulary::load, py::arg("path"))
        .def_static(
            "build",
            [](const std::vector<TurnPairs>& convs, int min_freq, std::size_t max_size) {
                std::vector<Conversation> cs;
                for (const auto& c : convs) cs.push_back(to_conversation(c));
                return Vocabulary::build(cs, min_freq, max_size);
            },
            py::arg("conversations"), py::arg("min_freq") = 1, py::arg("max_size") = 2000)
        .def("save", &Vocabulary::save, py::arg("path"))
        .def("__len__", &Vocabulary::size)
        .def("id_of", &Vocabulary::id_of)
        .def("token", &Vocabulary::token)
        .def_property_readonly("tokens", &Vocabulary::tokens)
        .def("encode", &Vocabulary::encode, py::arg("text"))
        .def("decode", [](const Vocabulary& v, const std::vector<TokenId>& ids) { return v.decode(ids); });

    m.def(
        "load_conversations",
        [](const std::filesystem::path& path) {
            std::vector<std::pair<std::string, TurnPairs>> out;
            for (const auto& c : load_conversations(path)) out.emplace_back(c.id, to_pairs(c));
            return out;
        },
        py::arg("path"), "List of (id, [(speaker, text), ...]) after normalization.");

    m.def(
        "assemble",
        [](const TurnPairs& turns, const Vocabulary& vocab) {
            return sequence_dict(assemble(segment_conversation(to_conversation(turns), vocab)));
        },
        py::arg("turns"), py::arg("vocab"));

    m.def(
        "training_instances",
        [](const TurnPairs& turns, const Vocabulary& vocab, std::size_t max_len) {
            py::list out;
            for (const auto& inst : make_training_instances(to_conversation(turns), vocab, max_len)) {
                auto d = sequence_dict(inst.input);
                d["loss_mask"] = inst.loss_mask;
                d["target"] = py::make_tuple(inst.target_start, inst.target_end);
                out.append(d);
            }
            return out;
        },
        py::arg("turns"), py::arg("vocab"), py::arg("max_len") = 0);

    m.def(
        "masked_cross_entropy",
        [](const Matrix& logits, const std::vector<TokenId>& targets, const std::vector<std::uint8_t>& mask) {
            return masked_cross_entropy(logits, targets, mask).loss;
        },
        py::arg("logits"), py::arg("targets"), py::arg("mask"));

    m.def(
        "lr_at",
        [](std::size_t step, double base_lr, double warmup_fraction, std::size_t total_steps) {
            return Schedule{base_lr, warmup_fraction, total_steps}.lr_at(step);
        },
        py::arg("step"), py::arg("base_lr"), py::arg("warmup_fraction"), py::arg("total_steps"));

    m.def(
        "evaluate_metrics",
        [](const std::vector<std::pair<std::string, std::string>>& pairs) {
            std::vector<EvalPair> ps;
            for (const auto& [hyp, ref] : pairs) ps.push_back(make_eval_pair(hyp, ref));
            return report_dict(evaluate_metrics(ps));
        },
        py::arg("pairs"), "Scores (hypothesis, reference) string pairs.");

    m.def(
        "distinct_n",
        [](const std::vector<std::string>& hyps, int n) {
            std::vector<Tokens> toks;
            for (const auto& h : hyps) toks.push_back(tokenize(h));
            return distinct_n(toks, n);
        },
        py::arg("hypotheses"), py::arg("n"));

    py::class_<ModelParameters, std::shared_ptr<ModelParameters>>(m, "Model")
        .def_static(
            "load", [](const std::filesystem::path& p) { return std::make_shared<ModelParameters>(load_checkpoint(p)); },
            py::arg("path"))
        .def("save", [](const ModelParameters& p, const std::filesystem::path& path) { save_checkpoint(path, p); })
        .def_property_readonly("vocab_size", [](const ModelParameters& p) { return p.config.vocab_size; })
        .def_property_readonly("embed_dim", [](const ModelParameters& p) { return p.config.embed_dim; })
        .def_property_readonly("max_positions", [](const ModelParameters& p) { return p.config.max_positions; })
        .def_property_readonly("parameter_count", [](const ModelParameters& p) { return parameter_count(p); })
        .def(
            "forward",
            [](const ModelParameters& p, const std::vector<TokenId>& ids, const std::vector<std::uint8_t>& types,
               const std::vector<std::int32_t>& positions) { return forward(p, ids, types, positions); },
            py::arg("ids"), py::arg("types"), py::arg("positions"), "Eval-mode logits, one row per token.");

    m.def(
        "init_model",
        [](std::size_t vocab_size, std::uint64_t seed, const std::string& config_text) {
            return std::make_shared<ModelParameters>(
                init_parameters(model_config_from(KeyValueConfig::parse(config_text), vocab_size), seed));
        },
        py::arg("vocab_size"), py::arg("seed") = 0, py::arg("config") = "",
        "Desk preset overridden by `key = value` lines.");

    m.def(
        "train",
        [](ModelParameters& params, const std::vector<TurnPairs>& convs, const Vocabulary& vocab,
           const std::string& config_text) {
            std::vector<Conversation> cs;
            for (const auto& c : convs) cs.push_back(to_conversation(c));
            const auto tc = train_config_from(KeyValueConfig::parse(config_text));
            TrainReport report;
            {
                py::gil_scoped_release release;
                report = train(params, cs, {}, vocab, tc);
            }
            std::vector<double> losses;
            for (const auto& e : report.epochs) losses.push_back(e.train_loss);
            py::dict d;
            d["steps"] = report.steps.size();
            d["epoch_losses"] = losses;
            d["wall_seconds"] = report.wall_seconds;
            return d;
        },
        py::arg("model"), py::arg("conversations"), py::arg("vocab"), py::arg("config") = "",
        "Trains in place on every conversation; returns a short report.");

    py::class_<ChatSession>(m, "ChatSession")
        .def(py::init([](std::shared_ptr<ModelParameters> params, const Vocabulary& vocab, std::size_t max_new_tokens) {
                 DecodeConfig dc;
                 dc.max_new_tokens = max_new_tokens;
                 return ChatSession(std::move(params), std::make_shared<const Vocabulary>(vocab), dc);
             }),
             py::arg("model"), py::arg("vocab"), py::arg("max_new_tokens") = 32)
        .def("reply", [](ChatSession& s, const std::string& text) { return s.generate_reply(text).text; },
             py::arg("utterance"))
        .def("context", [](const ChatSession& s) { return sequence_dict(s.context_view()); })
        .def_property_readonly("exchanges", &ChatSession::exchanges)
        .def("reset", &ChatSession::reset);
}

// turnlm: prepare / train / eval / ablate / chat / serve.

#include <atomic>
#include <csignal>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "turnlm/assembly.hpp"
#include "turnlm/checkpoint.hpp"
#include "turnlm/corpus.hpp"
#include "turnlm/decoding.hpp"
#include "turnlm/errors.hpp"
#include "turnlm/experiments.hpp"
#include "turnlm/keyvalue.hpp"
#include "turnlm/metrics.hpp"
#include "turnlm/model.hpp"
#include "turnlm/service.hpp"
#include "turnlm/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace turnlm;

namespace {

fs::path default_vocab(const fs::path& ckpt, const std::string& explicit_vocab) {
    return explicit_vocab.empty() ? fs::path(ckpt.string() + ".vocab") : fs::path(explicit_vocab);
}

std::vector<std::uint64_t> parse_seeds(const std::string& csv) {
    std::vector<std::uint64_t> seeds;
    std::stringstream ss(csv);
    std::string item;
    while (std::getline(ss, item, ','))
        if (!item.empty()) seeds.push_back(std::stoull(item));
    return seeds;
}

// ---------------------------------------------------------------------------

struct PrepareArgs {
    std::string in, vocab_out, dump_instances;
    int min_freq = 1;
    std::size_t max_size = 2000;
    std::size_t max_len = 0;
};

int run_prepare(const PrepareArgs& a) {
    const auto convs = load_conversations(a.in);
    const auto vocab = Vocabulary::build(convs, a.min_freq, a.max_size);
    vocab.save(a.vocab_out);

    std::size_t turns = 0, bots = 0, tokens = 0, unknown = 0;
    for (const auto& c : convs) {
        turns += c.turns.size();
        bots += c.bot_turns();
        for (const auto& t : c.turns)
            for (TokenId id : vocab.encode(t.text)) {
                ++tokens;
                unknown += id == Vocabulary::kUnk;
            }
    }
    if (!a.dump_instances.empty()) {
        std::ofstream out(a.dump_instances);
        if (!out) throw std::runtime_error("cannot write " + a.dump_instances);
        for (const auto& inst : instances_for(convs, vocab, a.max_len)) out << instance_to_json(inst) << '\n';
    }
    std::cout << json{{"conversations", convs.size()}, {"turns", turns},       {"bot_turns", bots},
                      {"tokens", tokens},              {"unknown", unknown},   {"vocab_size", vocab.size()}}
                     .dump()
              << '\n';
    return 0;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
    std::string config, data, vocab, out, init;
};

int run_train(const TrainArgs& a) {
    const auto kv = KeyValueConfig::load(a.config);
    const auto vocab = Vocabulary::load(a.vocab);
    const auto convs = load_conversations(a.data);
    const TrainConfig tc = train_config_from(kv);
    ModelConfig mc = model_config_from(kv, vocab.size());

    ModelParameters params;
    if (!a.init.empty()) {
        params = load_checkpoint(a.init);
        if (params.config.vocab_size != vocab.size()) throw ContractError("--init checkpoint vocabulary mismatch");
        params.config.dropout = mc.dropout;
        if (mc.lora_enabled && !params.config.lora_enabled) attach_lora(params, mc.lora_rank, mc.lora_alpha, tc.seed);
    } else {
        params = init_parameters(mc, tc.seed);
    }

    std::vector<Conversation> train_set, validation_set;
    if (kv.get_bool("holdout", convs.size() >= 10)) {
        auto split = split_dataset(convs, tc.seed);
        train_set = std::move(split.train);
        validation_set = std::move(split.validation);
    } else {
        train_set = convs;
    }

    TrainCallbacks cb;
    cb.on_step = [](const StepRecord& r) { std::cout << r.to_json() << '\n'; };
    cb.on_epoch = [](const EpochRecord& r) { std::cout << r.to_json() << '\n'; };
    const auto report = train(params, train_set, validation_set, vocab, tc, cb);

    save_checkpoint(a.out, params);
    vocab.save(a.out + ".vocab");
    std::cout << json{{"done", true},
                      {"steps", report.steps.size()},
                      {"epochs", report.epochs.size()},
                      {"seed", report.seed},
                      {"wall_seconds", report.wall_seconds},
                      {"checkpoint", a.out}}
                     .dump()
              << std::endl;
    return 0;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
    std::string ckpt, vocab, data, metrics_out, split = "all";
    std::uint64_t seed = 0;
    bool x100 = false;
    std::size_t max_new_tokens = 64;
};

int run_eval(const EvalArgs& a) {
    const auto params = load_checkpoint(a.ckpt);
    const auto vocab = Vocabulary::load(default_vocab(a.ckpt, a.vocab));
    auto convs = load_conversations(a.data);
    if (a.split == "test") {
        convs = split_dataset(convs, a.seed).test;
    } else if (a.split != "all") {
        throw ContractError("--split must be all or test");
    }

    DecodeConfig dc;
    dc.max_new_tokens = a.max_new_tokens;
    std::mt19937_64 rng(dc.seed);
    std::vector<EvalPair> pairs;
    for (const auto& conv : convs) {
        for (std::size_t k = 1; k < conv.turns.size(); k += 2) {
            Conversation context{conv.id, std::vector<Turn>(conv.turns.begin(), conv.turns.begin() + static_cast<std::ptrdiff_t>(k))};
            const auto reply = generate_from_context(params, vocab, context, dc, rng);
            pairs.push_back(make_eval_pair(reply.text, conv.turns[k].text));
        }
    }
    if (pairs.empty()) throw ContractError("no bot turn to evaluate");
    const auto report = evaluate_metrics(pairs);
    const std::string line = report.to_json(a.x100 ? 100.0 : 1.0);
    std::ofstream out(a.metrics_out);
    if (!out) throw std::runtime_error("cannot write " + a.metrics_out);
    out << line << '\n';
    std::cout << line << '\n';
    return 0;
}

int run_score(const std::string& pairs_path, const std::string& metrics_out, bool x100) {
    const auto pairs = load_eval_pairs(pairs_path);
    if (pairs.empty()) throw ContractError("no evaluation pair in " + pairs_path);
    const std::string line = evaluate_metrics(pairs).to_json(x100 ? 100.0 : 1.0);
    if (!metrics_out.empty()) {
        std::ofstream out(metrics_out);
        if (!out) throw std::runtime_error("cannot write " + metrics_out);
        out << line << '\n';
    }
    std::cout << line << '\n';
    return 0;
}

// ---------------------------------------------------------------------------

struct AblateArgs {
    std::string spec, seeds = "1,2,3";
    bool sequential = false;
};

int run_ablate(const AblateArgs& a) {
    const auto kv = KeyValueConfig::load(a.spec);
    const auto spec = synthetic_spec_from(kv);
    const auto seeds = parse_seeds(a.seeds);
    // vocab_size is filled in per run from the generated corpus.
    const ModelConfig mc = model_config_from(kv, Vocabulary::kNumSpecials);
    const TrainConfig tc = train_config_from(kv);
    const auto result = run_ablation(spec, mc, tc, seeds, !a.sequential);
    for (const auto& line : result.to_json_lines()) std::cout << line << '\n';
    return 0;
}

// ---------------------------------------------------------------------------

struct ChatArgs {
    std::string ckpt, vocab, config;
};

int run_chat(const ChatArgs& a) {
    auto params = std::make_shared<const ModelParameters>(load_checkpoint(a.ckpt));
    auto vocab = std::make_shared<const Vocabulary>(Vocabulary::load(default_vocab(a.ckpt, a.vocab)));
    DecodeConfig dc;
    if (!a.config.empty()) dc = decode_config_from(KeyValueConfig::load(a.config));
    ChatSession session(params, vocab, dc);

    std::string line;
    while (true) {
        std::cout << "> " << std::flush;
        if (!std::getline(std::cin, line)) break;
        if (line == "/quit") break;
        if (line == "/reset") {
            session.reset();
            std::cout << "[reset]\n";
            continue;
        }
        if (tokenize(line).empty()) continue;
        std::cout << session.generate_reply(line).text << '\n';
    }
    return 0;
}

// ---------------------------------------------------------------------------

std::atomic<ChatService*> g_service{nullptr};

void on_signal(int) {
    if (auto* s = g_service.load()) s->stop();
}

int run_serve(const std::string& config_path) {
    auto config = ServiceConfig::from(KeyValueConfig::load(config_path));
    auto service = ChatService::from_config(config);
    const int port = service->bind();
    g_service = service.get();
    std::signal(SIGINT, on_signal);
    std::signal(SIGTERM, on_signal);
    std::cout << json{{"listening", true}, {"host", config.host}, {"port", port}}.dump() << std::endl;
    service->listen();
    g_service = nullptr;
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Turn-typed dialogue language model toolkit"};
    app.require_subcommand(1);

    PrepareArgs prep;
    auto* prepare = app.add_subcommand("prepare", "Normalize a corpus and build its vocabulary");
    prepare->add_option("--in", prep.in, "Conversation file (JSONL)")->required();
    prepare->add_option("--vocab-out", prep.vocab_out, "Vocabulary output file")->required();
    prepare->add_option("--min-freq", prep.min_freq, "Minimum token frequency")->default_val(1);
    prepare->add_option("--max-size", prep.max_size, "Maximum vocabulary size including specials")->default_val(2000);
    prepare->add_option("--dump-instances", prep.dump_instances, "Write training instances as JSONL");
    prepare->add_option("--max-len", prep.max_len, "Truncate dumped instances to this length (0: none)");

    TrainArgs tr;
    auto* train_cmd = app.add_subcommand("train", "Train a model and write a checkpoint");
    train_cmd->add_option("--config", tr.config, "Training config (key = value)")->required();
    train_cmd->add_option("--data", tr.data, "Conversation file (JSONL)")->required();
    train_cmd->add_option("--vocab", tr.vocab, "Vocabulary file")->required();
    train_cmd->add_option("--out", tr.out, "Checkpoint output path")->required();
    train_cmd->add_option("--init", tr.init, "Start from this checkpoint (LoRA fine-tuning)");

    EvalArgs ev;
    auto* eval = app.add_subcommand("eval", "Generate greedy replies and score them");
    eval->add_option("--ckpt", ev.ckpt, "Checkpoint")->required();
    eval->add_option("--vocab", ev.vocab, "Vocabulary (default: <ckpt>.vocab)");
    eval->add_option("--data", ev.data, "Conversation file (JSONL)")->required();
    eval->add_option("--metrics-out", ev.metrics_out, "Metric report output")->required();
    eval->add_option("--split", ev.split, "all | test")->default_val("all");
    eval->add_option("--seed", ev.seed, "Split seed for --split test")->default_val(0);
    eval->add_option("--max-new-tokens", ev.max_new_tokens, "Generation cap")->default_val(64);
    eval->add_flag("--x100", ev.x100, "Report scores multiplied by 100");

    std::string score_in, score_out;
    bool score_x100 = false;
    auto* score = app.add_subcommand("score", "Score hypothesis/reference pairs");
    score->add_option("--in", score_in, "Pairs file, one {\"hyp\", \"ref\"} record per line")->required();
    score->add_option("--metrics-out", score_out, "Metric report output");
    score->add_flag("--x100", score_x100, "Report scores multiplied by 100");

    AblateArgs ab;
    auto* ablate = app.add_subcommand("ablate", "Token-type ablation on the synthetic role_echo corpus");
    ablate->add_option("--spec", ab.spec, "Ablation spec (key = value)")->required();
    ablate->add_option("--seeds", ab.seeds, "Comma-separated training seeds")->default_val("1,2,3");
    ablate->add_flag("--sequential", ab.sequential, "Run arms one after another");

    ChatArgs ch;
    auto* chat = app.add_subcommand("chat", "Interactive terminal chat");
    chat->add_option("--ckpt", ch.ckpt, "Checkpoint")->required();
    chat->add_option("--vocab", ch.vocab, "Vocabulary (default: <ckpt>.vocab)");
    chat->add_option("--config", ch.config, "Decode settings (decode.* keys)");

    std::string serve_config;
    auto* serve = app.add_subcommand("serve", "HTTP chat service");
    serve->add_option("--config", serve_config, "Service config (key = value)")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << json{{"error", e.what()}, {"kind", "usage"}}.dump() << '\n';
        return 2;
    }

    const std::string command = app.get_subcommands().front()->get_name();
    try {
        if (command == "prepare") return run_prepare(prep);
        if (command == "train") return run_train(tr);
        if (command == "eval") return run_eval(ev);
        if (command == "score") return run_score(score_in, score_out, score_x100);
        if (command == "ablate") return run_ablate(ab);
        if (command == "chat") return run_chat(ch);
        if (command == "serve") return run_serve(serve_config);
    } catch (const std::exception& e) {
        std::cerr << json{{"error", e.what()}, {"command", command}}.dump() << '\n';
        return 1;
    }
    return 1;
}

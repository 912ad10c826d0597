// Writes the tiny randomized checkpoint used by the forward golden test.
//   make_tiny_model <out.ckpt>

#include <iostream>
#include <random>

#include "turnlm/checkpoint.hpp"
#include "turnlm/model.hpp"

using namespace turnlm;

int main(int argc, char** argv) {
    if (argc != 2) {
        std::cerr << "usage: make_tiny_model <out.ckpt>\n";
        return 2;
    }
    ModelConfig cfg;
    cfg.vocab_size = 20;
    cfg.embed_dim = 8;
    cfg.num_layers = 2;
    cfg.num_heads = 2;
    cfg.ffn_dim = 16;
    cfg.max_positions = 16;
    cfg.dropout = 0.1;
    cfg.lora_enabled = true;
    cfg.lora_rank = 2;
    cfg.lora_alpha = 0.7;
    auto params = init_parameters(cfg, 2024);

    // Larger-than-default noise everywhere so every term moves the logits.
    std::mt19937_64 rng(99);
    std::normal_distribution<double> noise(0.0, 0.4);
    for_each_tensor(params, [&](const std::string&, Matrix& m, TensorKind kind) {
        for (Eigen::Index i = 0; i < m.size(); ++i) {
            const double base = kind == TensorKind::NormGain ? 1.0 : 0.0;
            m.data()[i] = base + noise(rng);
        }
    });
    save_checkpoint(argv[1], params);
    return 0;
}

#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "xmc/rng.hpp"
#include "xmc/tape.hpp"
#include "xmc/tensor.hpp"

namespace xmc::model {

struct ModelConfig {
    int vocab_size = 2000;
    int embed_dim = 32;
    int encoder_layers = 2;
    int heads = 2;
    int classes = 10;
    int max_len = 512;
    double dropout = 0.2;

    int head_dim() const { return embed_dim / heads; }
    int ffn_dim() const { return 4 * embed_dim; }
    void validate() const;
};

// All learnable tensors in a fixed, documented order (the serialization
// and optimizer order):
//   tok_emb, pos_emb,
//   per layer: ln1_gamma, ln1_beta, wq, bq, wk, bk, wv, bv, wo, bo,
//              ln2_gamma, ln2_beta, w1, b1, w2, b2,
//   dec_wkey, dec_wvalue, dec_ln_gamma, dec_ln_beta, dec_wout, class_emb
struct ModelParameters {
    ModelConfig config;
    std::vector<Tensor> tensors;

    static ModelParameters init(const ModelConfig& cfg, Rng& rng);
    static std::vector<std::string> tensor_names(const ModelConfig& cfg);

    Tensor& at(const std::string& name);
    const Tensor& at(const std::string& name) const;
    std::size_t index_of(const std::string& name) const;
};

// Node handles into the tape of one forward pass.
struct GraphNodes {
    ad::NodeId x = -1;          // token embeddings, N x D
    ad::NodeId h = -1;          // contextual representations, N x D
    ad::NodeId attention = -1;  // cross-attention, J x N
    ad::NodeId y = -1;          // probabilities, J x 1
    std::vector<std::vector<ad::NodeId>> self_attention;  // [layer][head], N x N
};

struct ParamNodes {
    std::vector<ad::NodeId> ids;  // parallel to ModelParameters::tensors
    ad::NodeId at(const ModelParameters& p, const std::string& name) const {
        return ids[p.index_of(name)];
    }
};

// Binds parameters onto a tape, as differentiation roots when trainable.
ParamNodes bind_params(ad::Tape& tape, const ModelParameters& params, bool trainable);

// Rejects out-of-range ids (naming the position) and over-length input.
void validate_tokens(const ModelParameters& params, const std::vector<int>& tokens);

// Token embedding rows as a plain tensor, outside any tape.
Tensor embed_lookup(const ModelParameters& params, const std::vector<int>& tokens);

// Gathers token embeddings; errors name the offending position.
ad::NodeId embed_tokens(ad::Tape& tape, const ModelParameters& params, const ParamNodes& nodes,
                        const std::vector<int>& token_ids);

// Optional per-sublayer dropout masks (2 per encoder layer, each N x D,
// entries 0 or 1/(1-p)). Attribution and evaluation passes leave this
// empty so the forward is deterministic.
struct DropoutMasks {
    std::vector<Tensor> masks;
};

// Builds encoder + cross-attention decoder downstream of an embeddings
// node `x` (N x D). Positional embeddings are added inside.
GraphNodes build_forward(ad::Tape& tape, const ModelParameters& params, const ParamNodes& nodes,
                         ad::NodeId x, const DropoutMasks* dropout = nullptr);

// One recorded forward pass of the full classifier. The tape is retained
// for gradient queries; `x` is a differentiation root.
struct ForwardResult {
    Tensor probabilities;   // J x 1
    Tensor attention;       // J x N
    Tensor hidden;          // N x D
    std::vector<std::vector<Tensor>> self_attention;  // [layer][head], N x N
    ad::Tape tape;
    GraphNodes nodes;
    int n_tokens = 0;
};

std::pair<Tensor, std::vector<std::vector<Tensor>>> encode(const std::vector<int>& tokens,
                                                           const ModelParameters& params);

std::pair<Tensor, Tensor> decode(const Tensor& hidden, const ModelParameters& params);

ForwardResult predict(const std::vector<int>& tokens, const ModelParameters& params);

// Cheap repeated forwards for perturbation methods and faithfulness
// masking: records one graph per sequence length, then replays it with a
// fresh embedding root. Not thread-safe; give each worker its own.
class Predictor {
public:
    explicit Predictor(const ModelParameters& params) : params_(&params) {}

    const ModelParameters& params() const { return *params_; }

    // J x 1 probabilities.
    Tensor probs(const std::vector<int>& tokens);

private:
    struct Cached {
        ad::Tape tape;
        ad::NodeId x = -1;
        ad::NodeId y = -1;
    };
    const ModelParameters* params_;
    std::map<int, Cached> by_length_;
};

// Versioned little-endian binary checkpoint: magic "XMC1", u32 version,
// u64 length-prefixed JSON config, then the flat tensors in order.
void save_model(const std::string& path, const ModelParameters& params);
ModelParameters load_model(const std::string& path);

}  // namespace xmc::model

#include "xmc/model.hpp"

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>

#include <json.hpp>

namespace xmc::model {

using ad::NodeId;
using ad::Tape;

void ModelConfig::validate() const {
    if (vocab_size < 5) throw XmcError("model config: vocab_size must cover the reserved tokens");
    if (embed_dim <= 0 || heads <= 0 || embed_dim % heads != 0)
        throw XmcError("model config: embed_dim must be a positive multiple of heads");
    if (encoder_layers < 0) throw XmcError("model config: encoder_layers must be >= 0");
    if (classes <= 0) throw XmcError("model config: classes must be positive");
    if (max_len < 3) throw XmcError("model config: max_len must be at least 3");
    if (dropout < 0.0 || dropout >= 1.0) throw XmcError("model config: dropout must be in [0, 1)");
}

std::vector<std::string> ModelParameters::tensor_names(const ModelConfig& cfg) {
    std::vector<std::string> names{"tok_emb", "pos_emb"};
    for (int l = 0; l < cfg.encoder_layers; ++l) {
        std::string p = "layer" + std::to_string(l) + ".";
        for (const char* s : {"ln1_gamma", "ln1_beta", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
                              "ln2_gamma", "ln2_beta", "w1", "b1", "w2", "b2"}) {
            names.push_back(p + s);
        }
    }
    for (const char* s : {"dec_wkey", "dec_wvalue", "dec_ln_gamma", "dec_ln_beta", "dec_wout", "class_emb"}) {
        names.emplace_back(s);
    }
    return names;
}

namespace {

Tensor shaped_for(const ModelConfig& cfg, const std::string& name) {
    auto d = static_cast<std::size_t>(cfg.embed_dim);
    auto f = static_cast<std::size_t>(cfg.ffn_dim());
    std::string base = name.substr(name.find('.') + 1);  // strips "layerN." when present
    if (name == "tok_emb") return Tensor({static_cast<std::size_t>(cfg.vocab_size), d});
    if (name == "pos_emb") return Tensor({static_cast<std::size_t>(cfg.max_len), d});
    if (name == "dec_wkey" || name == "dec_wvalue") return Tensor({d, d});
    if (name == "dec_ln_gamma" || name == "dec_ln_beta") return Tensor({1, d});
    if (name == "dec_wout") return Tensor({d, 1});
    if (name == "class_emb") return Tensor({static_cast<std::size_t>(cfg.classes), d});
    if (base == "wq" || base == "wk" || base == "wv" || base == "wo") return Tensor({d, d});
    if (base == "w1") return Tensor({d, f});
    if (base == "w2") return Tensor({f, d});
    if (base == "b1") return Tensor({1, f});
    if (base.size() >= 2 && (base[0] == 'b' || base.rfind("ln", 0) == 0)) return Tensor({1, d});
    throw XmcError("model: unknown tensor name " + name);
}

bool is_weight_matrix(const std::string& name) {
    std::string base = name.substr(name.find('.') + 1);
    return name == "tok_emb" || name == "pos_emb" || name == "class_emb" || name == "dec_wkey" ||
           name == "dec_wvalue" || name == "dec_wout" || base == "wq" || base == "wk" || base == "wv" ||
           base == "wo" || base == "w1" || base == "w2";
}

bool is_ln_gamma(const std::string& name) { return name.find("gamma") != std::string::npos; }

}  // namespace

ModelParameters ModelParameters::init(const ModelConfig& cfg, Rng& rng) {
    cfg.validate();
    ModelParameters p;
    p.config = cfg;
    for (const std::string& name : tensor_names(cfg)) {
        Tensor t = shaped_for(cfg, name);
        if (is_weight_matrix(name)) {
            for (double& v : t.data()) v = rng.normal(0.0, 0.02);
        } else if (is_ln_gamma(name)) {
            for (double& v : t.data()) v = 1.0;
        }
        p.tensors.push_back(std::move(t));
    }
    return p;
}

std::size_t ModelParameters::index_of(const std::string& name) const {
    auto names = tensor_names(config);
    for (std::size_t i = 0; i < names.size(); ++i)
        if (names[i] == name) return i;
    throw XmcError("model: unknown tensor name " + name);
}

Tensor& ModelParameters::at(const std::string& name) { return tensors[index_of(name)]; }
const Tensor& ModelParameters::at(const std::string& name) const { return tensors[index_of(name)]; }

ParamNodes bind_params(Tape& tape, const ModelParameters& params, bool trainable) {
    ParamNodes nodes;
    nodes.ids.reserve(params.tensors.size());
    for (const Tensor& t : params.tensors) {
        nodes.ids.push_back(trainable ? tape.input(t) : tape.constant(t));
    }
    return nodes;
}

NodeId embed_tokens(Tape& tape, const ModelParameters& params, const ParamNodes& nodes,
                    const std::vector<int>& token_ids) {
    validate_tokens(params, token_ids);
    return tape.gather_rows(nodes.at(params, "tok_emb"), token_ids);
}

GraphNodes build_forward(Tape& tape, const ModelParameters& params, const ParamNodes& nodes, NodeId x,
                         const DropoutMasks* dropout) {
    const ModelConfig& cfg = params.config;
    const int n = static_cast<int>(tape.value(x).rows());
    const int dk = cfg.head_dim();
    const double scale = 1.0 / std::sqrt(static_cast<double>(dk));

    GraphNodes g;
    g.x = x;

    std::vector<int> positions(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) positions[static_cast<std::size_t>(i)] = i;
    NodeId hx = tape.add(x, tape.gather_rows(nodes.at(params, "pos_emb"), positions));

    auto mask_at = [&](int index) -> NodeId {
        return tape.constant(dropout->masks[static_cast<std::size_t>(index)]);
    };

    for (int l = 0; l < cfg.encoder_layers; ++l) {
        std::string p = "layer" + std::to_string(l) + ".";
        auto w = [&](const char* s) { return nodes.at(params, p + s); };
        auto linear = [&](NodeId in, const char* wn, const char* bn) {
            return tape.add(tape.matmul(in, w(wn)), tape.broadcast_row(w(bn), n));
        };

        NodeId u = tape.layernorm_row(hx, w("ln1_gamma"), w("ln1_beta"));
        NodeId q = linear(u, "wq", "bq");
        NodeId k = linear(u, "wk", "bk");
        NodeId v = linear(u, "wv", "bv");

        std::vector<NodeId> head_outputs;
        std::vector<NodeId> head_attn;
        for (int hd = 0; hd < cfg.heads; ++hd) {
            int c0 = hd * dk, c1 = (hd + 1) * dk;
            NodeId qh = tape.slice_cols(q, c0, c1);
            NodeId kh = tape.slice_cols(k, c0, c1);
            NodeId vh = tape.slice_cols(v, c0, c1);
            NodeId scores = tape.affine(tape.matmul(qh, tape.transpose(kh)), scale, 0.0);
            NodeId attn = tape.softmax_rows(scores);
            head_attn.push_back(attn);
            head_outputs.push_back(tape.matmul(attn, vh));
        }
        g.self_attention.push_back(head_attn);
        NodeId o = head_outputs.size() == 1 ? head_outputs[0] : tape.concat_cols(head_outputs);
        NodeId attn_out = linear(o, "wo", "bo");
        if (dropout) attn_out = tape.mul(attn_out, mask_at(2 * l));
        hx = tape.add(hx, attn_out);

        NodeId u2 = tape.layernorm_row(hx, w("ln2_gamma"), w("ln2_beta"));
        NodeId ffn = linear(tape.gelu(linear(u2, "w1", "b1")), "w2", "b2");
        if (dropout) ffn = tape.mul(ffn, mask_at(2 * l + 1));
        hx = tape.add(hx, ffn);
    }
    g.h = hx;

    // Cross-attention decoder: K = H Wkey, V = H Wvalue,
    // A_j = softmax(C_j K^T), y_j = sigmoid(layernorm(A_j V) Wout).
    NodeId dk_mat = tape.matmul(hx, nodes.at(params, "dec_wkey"));
    NodeId dv_mat = tape.matmul(hx, nodes.at(params, "dec_wvalue"));
    NodeId scores = tape.matmul(nodes.at(params, "class_emb"), tape.transpose(dk_mat));
    g.attention = tape.softmax_rows(scores);
    NodeId ctx = tape.matmul(g.attention, dv_mat);
    NodeId normed = tape.layernorm_row(ctx, nodes.at(params, "dec_ln_gamma"), nodes.at(params, "dec_ln_beta"));
    g.y = tape.sigmoid(tape.matmul(normed, nodes.at(params, "dec_wout")));
    return g;
}

void validate_tokens(const ModelParameters& params, const std::vector<int>& tokens) {
    const ModelConfig& cfg = params.config;
    if (tokens.empty()) throw XmcError("encode: empty token sequence");
    if (static_cast<int>(tokens.size()) > cfg.max_len) {
        throw XmcError("encode: sequence of " + std::to_string(tokens.size()) + " tokens exceeds max_len " +
                       std::to_string(cfg.max_len) + " (truncation is the loader's job)");
    }
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (tokens[i] < 0 || tokens[i] >= cfg.vocab_size) {
            throw XmcError("encode: token id " + std::to_string(tokens[i]) + " at position " +
                           std::to_string(i) + " outside vocabulary of size " + std::to_string(cfg.vocab_size));
        }
    }
}

Tensor embed_lookup(const ModelParameters& params, const std::vector<int>& tokens) {
    validate_tokens(params, tokens);
    const Tensor& table = params.at("tok_emb");
    Tensor x({tokens.size(), table.cols()});
    for (std::size_t i = 0; i < tokens.size(); ++i)
        for (std::size_t j = 0; j < table.cols(); ++j)
            x.at(i, j) = table.at(static_cast<std::size_t>(tokens[i]), j);
    return x;
}

ForwardResult predict(const std::vector<int>& tokens, const ModelParameters& params) {
    params.config.validate();
    ForwardResult fr;
    ParamNodes nodes = bind_params(fr.tape, params, /*trainable=*/false);
    // The embedding matrix X is the differentiation root: gradient-based
    // attributions and the PGD/IGR objectives are all defined on it.
    NodeId x = fr.tape.input(embed_lookup(params, tokens));
    fr.nodes = build_forward(fr.tape, params, nodes, x);
    fr.n_tokens = static_cast<int>(tokens.size());
    fr.probabilities = fr.tape.value(fr.nodes.y);
    fr.attention = fr.tape.value(fr.nodes.attention);
    fr.hidden = fr.tape.value(fr.nodes.h);
    for (const auto& layer : fr.nodes.self_attention) {
        std::vector<Tensor> heads;
        for (NodeId id : layer) heads.push_back(fr.tape.value(id));
        fr.self_attention.push_back(std::move(heads));
    }
    return fr;
}

Tensor Predictor::probs(const std::vector<int>& tokens) {
    int n = static_cast<int>(tokens.size());
    auto it = by_length_.find(n);
    if (it == by_length_.end()) {
        Cached c;
        ParamNodes nodes = bind_params(c.tape, *params_, false);
        c.x = c.tape.input(embed_lookup(*params_, tokens));
        GraphNodes g = build_forward(c.tape, *params_, nodes, c.x);
        c.y = g.y;
        it = by_length_.emplace(n, std::move(c)).first;
    }
    Cached& c = it->second;
    auto vals = c.tape.replay({{c.x, embed_lookup(*params_, tokens)}});
    return vals[static_cast<std::size_t>(c.y)];
}

std::pair<Tensor, std::vector<std::vector<Tensor>>> encode(const std::vector<int>& tokens,
                                                           const ModelParameters& params) {
    ForwardResult fr = predict(tokens, params);
    return {fr.hidden, fr.self_attention};
}

std::pair<Tensor, Tensor> decode(const Tensor& hidden, const ModelParameters& params) {
    if (!hidden.all_finite()) throw XmcError("decode: hidden states contain non-finite values");
    if (hidden.cols() != static_cast<std::size_t>(params.config.embed_dim))
        throw XmcError("decode: hidden width " + hidden.shape_str() + " does not match embed_dim");
    Tape tape;
    int n = static_cast<int>(hidden.rows());
    NodeId h = tape.constant(hidden);
    NodeId k = tape.matmul(h, tape.constant(params.at("dec_wkey")));
    NodeId v = tape.matmul(h, tape.constant(params.at("dec_wvalue")));
    NodeId scores = tape.matmul(tape.constant(params.at("class_emb")), tape.transpose(k));
    NodeId att = tape.softmax_rows(scores);
    NodeId ctx = tape.matmul(att, v);
    NodeId normed = tape.layernorm_row(ctx, tape.constant(params.at("dec_ln_gamma")),
                                       tape.constant(params.at("dec_ln_beta")));
    NodeId y = tape.sigmoid(tape.matmul(normed, tape.constant(params.at("dec_wout"))));
    (void)n;
    return {tape.value(y), tape.value(att)};
}

// --- serialization -----------------------------------------------------------

namespace {
constexpr char kMagic[4] = {'X', 'M', 'C', '1'};
constexpr std::uint32_t kVersion = 1;

nlohmann::json config_to_json(const ModelConfig& c) {
    return nlohmann::json{{"vocab_size", c.vocab_size}, {"embed_dim", c.embed_dim},
                          {"encoder_layers", c.encoder_layers}, {"heads", c.heads},
                          {"classes", c.classes},       {"max_len", c.max_len},
                          {"dropout", c.dropout}};
}

ModelConfig config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.vocab_size = j.at("vocab_size").get<int>();
    c.embed_dim = j.at("embed_dim").get<int>();
    c.encoder_layers = j.at("encoder_layers").get<int>();
    c.heads = j.at("heads").get<int>();
    c.classes = j.at("classes").get<int>();
    c.max_len = j.at("max_len").get<int>();
    c.dropout = j.at("dropout").get<double>();
    return c;
}
}  // namespace

void save_model(const std::string& path, const ModelParameters& params) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw XmcError("save_model: cannot open " + path);
    out.write(kMagic, 4);
    std::uint32_t version = kVersion;
    out.write(reinterpret_cast<const char*>(&version), sizeof version);
    std::string cfg = config_to_json(params.config).dump();
    std::uint64_t len = cfg.size();
    out.write(reinterpret_cast<const char*>(&len), sizeof len);
    out.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
    for (const Tensor& t : params.tensors) {
        out.write(reinterpret_cast<const char*>(t.data().data()),
                  static_cast<std::streamsize>(t.numel() * sizeof(double)));
    }
    if (!out) throw XmcError("save_model: write failed for " + path);
}

ModelParameters load_model(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw XmcError("load_model: cannot open " + path);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kMagic, 4) != 0) throw XmcError("load_model: bad magic in " + path);
    std::uint32_t version = 0;
    in.read(reinterpret_cast<char*>(&version), sizeof version);
    if (!in || version != kVersion)
        throw XmcError("load_model: unsupported version " + std::to_string(version) + " in " + path);
    std::uint64_t len = 0;
    in.read(reinterpret_cast<char*>(&len), sizeof len);
    if (!in || len == 0 || len > (1u << 20)) throw XmcError("load_model: bad config length in " + path);
    std::string cfg_text(len, '\0');
    in.read(cfg_text.data(), static_cast<std::streamsize>(len));
    if (!in) throw XmcError("load_model: truncated config in " + path);

    ModelParameters params;
    try {
        params.config = config_from_json(nlohmann::json::parse(cfg_text));
    } catch (const nlohmann::json::exception& e) {
        throw XmcError(std::string("load_model: invalid config json: ") + e.what());
    }
    params.config.validate();
    for (const std::string& name : ModelParameters::tensor_names(params.config)) {
        Tensor t = shaped_for(params.config, name);
        in.read(reinterpret_cast<char*>(t.data().data()),
                static_cast<std::streamsize>(t.numel() * sizeof(double)));
        if (!in) throw XmcError("load_model: truncated tensor " + name + " in " + path);
        params.tensors.push_back(std::move(t));
    }
    in.peek();
    if (!in.eof()) throw XmcError("load_model: trailing bytes in " + path);
    for (const Tensor& t : params.tensors) {
        if (!t.all_finite()) throw XmcError("load_model: non-finite parameter values in " + path);
    }
    return params;
}

}  // namespace xmc::model

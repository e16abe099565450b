#include "zscore/net.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <istream>
#include <limits>
#include <numeric>
#include <ostream>
#include <set>
#include <type_traits>

#include "zscore/common.hpp"
#include "zscore/config_io.hpp"
#include "zscore/rng.hpp"

namespace zscore::net {
namespace {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::RowVectorXd;
using Eigen::VectorXd;
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

constexpr char kMagic[4] = {'Z', 'S', 'N', 'P'};
constexpr std::uint32_t kFormatVersion = 1;

// Named views into the flat parameter (or gradient) vector. Members are
// declared in storage order; the constructor walks the buffer front to back.
template <typename T>
struct Blocks {
    using M = Eigen::Map<std::conditional_t<std::is_const_v<T>, const RowMat, RowMat>>;
    using V = Eigen::Map<std::conditional_t<std::is_const_v<T>, const VectorXd, VectorXd>>;

    T* cursor;
    M W1;
    V b1;
    M W2;
    V b2;
    M W3;
    V b3;
    M W4;
    V b4;
    M E;
    M Wq;
    M Wk1;
    M Wv1;
    M Wk2;
    M Wv2;
    M Ws1;
    V bs1;
    V ws2;
    V bs2;
    M Wa1;
    V ba1;
    M Wa2;
    V ba2;

    Blocks(T* data, const NetParams& p)
        : cursor(data),
          W1(take(p.hidden_dim * p.input_dim), p.hidden_dim, p.input_dim),
          b1(take(p.hidden_dim), p.hidden_dim),
          W2(take(p.latent_dim * p.hidden_dim), p.latent_dim, p.hidden_dim),
          b2(take(p.latent_dim), p.latent_dim),
          W3(take(p.hidden_dim * p.latent_dim), p.hidden_dim, p.latent_dim),
          b3(take(p.hidden_dim), p.hidden_dim),
          W4(take(p.input_dim * p.hidden_dim), p.input_dim, p.hidden_dim),
          b4(take(p.input_dim), p.input_dim),
          E(take(p.n_clusters * p.embedding_dim), p.n_clusters, p.embedding_dim),
          Wq(take(p.attention_dim * p.latent_dim), p.attention_dim, p.latent_dim),
          Wk1(take(p.attention_dim * p.latent_dim), p.attention_dim, p.latent_dim),
          Wv1(take(p.attention_dim * p.latent_dim), p.attention_dim, p.latent_dim),
          Wk2(take(p.attention_dim * p.embedding_dim), p.attention_dim, p.embedding_dim),
          Wv2(take(p.attention_dim * p.embedding_dim), p.attention_dim, p.embedding_dim),
          Ws1(take(p.head_dim * p.attention_dim), p.head_dim, p.attention_dim),
          bs1(take(p.head_dim), p.head_dim),
          ws2(take(p.head_dim), p.head_dim),
          bs2(take(1), 1),
          Wa1(take(p.head_dim * p.attention_dim), p.head_dim, p.attention_dim),
          ba1(take(p.head_dim), p.head_dim),
          Wa2(take(p.input_dim * p.head_dim), p.input_dim, p.head_dim),
          ba2(take(p.input_dim), p.input_dim) {}

    T* take(Index n) {
        T* out = cursor;
        cursor += n;
        return out;
    }
};

struct Activations {
    MatrixXd X, H1, Z, G, XR, Emb, Q, K1, V1, K2, V2, Ctx, U, R, A;
    RowVectorXd alpha1, alpha2, S;
};

MatrixXd softmax_columns(const MatrixXd& logits) {
    MatrixXd out(logits.rows(), logits.cols());
    for (Index j = 0; j < logits.cols(); ++j) {
        const double m = logits.col(j).maxCoeff();
        out.col(j) = (logits.col(j).array() - m).exp().matrix();
        out.col(j) /= out.col(j).sum();
    }
    return out;
}

MatrixXd tanh_of(const MatrixXd& m) { return m.array().tanh().matrix(); }

Activations run_forward(const NetParams& params, const MatrixXd& X, const std::vector<int>& clusters) {
    const Blocks<const double> w(params.values.data(), params);
    Activations a;
    a.X = X;
    a.H1 = tanh_of((w.W1 * X).colwise() + w.b1);
    a.Z = tanh_of((w.W2 * a.H1).colwise() + w.b2);
    a.G = tanh_of((w.W3 * a.Z).colwise() + w.b3);
    a.XR = (w.W4 * a.G).colwise() + w.b4;

    a.Emb.resize(params.embedding_dim, X.cols());
    for (Index i = 0; i < X.cols(); ++i) {
        const int c = clusters[static_cast<std::size_t>(i)];
        if (c < 0 || c >= params.n_clusters) {
            throw Error(ErrorCode::UnknownCluster, "cluster " + std::to_string(c) + " has no embedding");
        }
        a.Emb.col(i) = w.E.row(c).transpose();
    }

    const double scale = 1.0 / std::sqrt(static_cast<double>(params.attention_dim));
    a.Q = w.Wq * a.Z;
    a.K1 = w.Wk1 * a.Z;
    a.V1 = w.Wv1 * a.Z;
    a.K2 = w.Wk2 * a.Emb;
    a.V2 = w.Wv2 * a.Emb;
    const RowVectorXd s1 = a.Q.cwiseProduct(a.K1).colwise().sum() * scale;
    const RowVectorXd s2 = a.Q.cwiseProduct(a.K2).colwise().sum() * scale;
    const RowVectorXd m = s1.cwiseMax(s2);
    const RowVectorXd e1 = (s1 - m).array().exp().matrix();
    const RowVectorXd e2 = (s2 - m).array().exp().matrix();
    const RowVectorXd sum = e1 + e2;
    a.alpha1 = e1.cwiseQuotient(sum);
    a.alpha2 = e2.cwiseQuotient(sum);
    a.Ctx = a.V1 * a.alpha1.asDiagonal();
    a.Ctx += a.V2 * a.alpha2.asDiagonal();

    a.U = tanh_of((w.Ws1 * a.Ctx).colwise() + w.bs1);
    a.S = ((w.ws2.transpose() * a.U).array() + w.bs2(0)).tanh().matrix();
    a.R = tanh_of((w.Wa1 * a.Ctx).colwise() + w.ba1);
    a.A = softmax_columns((w.Wa2 * a.R).colwise() + w.ba2);
    return a;
}

// Backpropagates output-side gradients dS (1 x B), dA (d x B), dXR (d x B).
void run_backward(const NetParams& params, const Activations& a, const std::vector<int>& clusters,
                  const RowVectorXd& dS, const MatrixXd& dA, const MatrixXd& dXR, VectorXd& gradient) {
    const Blocks<const double> w(params.values.data(), params);
    Blocks<double> g(gradient.data(), params);
    const double scale = 1.0 / std::sqrt(static_cast<double>(params.attention_dim));
    auto dtanh = [](const MatrixXd& grad, const MatrixXd& out) {
        return grad.cwiseProduct((1.0 - out.array().square()).matrix()).eval();
    };

    // Score head.
    const RowVectorXd dY = dS.cwiseProduct((1.0 - a.S.array().square()).matrix());
    g.ws2 += a.U * dY.transpose();
    g.bs2(0) += dY.sum();
    const MatrixXd dUp = dtanh(w.ws2 * dY, a.U);
    g.Ws1 += dUp * a.Ctx.transpose();
    g.bs1 += dUp.rowwise().sum();
    MatrixXd dCtx = w.Ws1.transpose() * dUp;

    // Weight head: softmax Jacobian applied column by column.
    const RowVectorXd inner = a.A.cwiseProduct(dA).colwise().sum();
    const MatrixXd dLogit = a.A.cwiseProduct(dA - RowVectorXd::Ones(a.A.rows()).transpose() * inner);
    g.Wa2 += dLogit * a.R.transpose();
    g.ba2 += dLogit.rowwise().sum();
    const MatrixXd dRp = dtanh(w.Wa2.transpose() * dLogit, a.R);
    g.Wa1 += dRp * a.Ctx.transpose();
    g.ba1 += dRp.rowwise().sum();
    dCtx += w.Wa1.transpose() * dRp;

    // Attention over the two tokens.
    const MatrixXd dV1 = dCtx * a.alpha1.asDiagonal();
    const MatrixXd dV2 = dCtx * a.alpha2.asDiagonal();
    const RowVectorXd dal1 = dCtx.cwiseProduct(a.V1).colwise().sum();
    const RowVectorXd dal2 = dCtx.cwiseProduct(a.V2).colwise().sum();
    const RowVectorXd mean = a.alpha1.cwiseProduct(dal1) + a.alpha2.cwiseProduct(dal2);
    const RowVectorXd ds1 = a.alpha1.cwiseProduct(dal1 - mean) * scale;
    const RowVectorXd ds2 = a.alpha2.cwiseProduct(dal2 - mean) * scale;
    const MatrixXd dQ = a.K1 * ds1.asDiagonal() + a.K2 * ds2.asDiagonal();
    const MatrixXd dK1 = a.Q * ds1.asDiagonal();
    const MatrixXd dK2 = a.Q * ds2.asDiagonal();
    g.Wq += dQ * a.Z.transpose();
    g.Wk1 += dK1 * a.Z.transpose();
    g.Wv1 += dV1 * a.Z.transpose();
    g.Wk2 += dK2 * a.Emb.transpose();
    g.Wv2 += dV2 * a.Emb.transpose();
    MatrixXd dZ = w.Wq.transpose() * dQ + w.Wk1.transpose() * dK1 + w.Wv1.transpose() * dV1;
    const MatrixXd dEmb = w.Wk2.transpose() * dK2 + w.Wv2.transpose() * dV2;
    for (Index i = 0; i < dEmb.cols(); ++i) g.E.row(clusters[static_cast<std::size_t>(i)]) += dEmb.col(i).transpose();

    // Decoder.
    g.W4 += dXR * a.G.transpose();
    g.b4 += dXR.rowwise().sum();
    const MatrixXd dGp = dtanh(w.W4.transpose() * dXR, a.G);
    g.W3 += dGp * a.Z.transpose();
    g.b3 += dGp.rowwise().sum();
    dZ += w.W3.transpose() * dGp;

    // Encoder.
    const MatrixXd dZp = dtanh(dZ, a.Z);
    g.W2 += dZp * a.H1.transpose();
    g.b2 += dZp.rowwise().sum();
    const MatrixXd dH1p = dtanh(w.W2.transpose() * dZp, a.H1);
    g.W1 += dH1p * a.X.transpose();
    g.b1 += dH1p.rowwise().sum();
}

MatrixXd gather_columns(const TrainingSet& set, const std::vector<std::size_t>& rows) {
    MatrixXd X(set.x.cols(), static_cast<Index>(rows.size()));
    for (std::size_t i = 0; i < rows.size(); ++i) X.col(static_cast<Index>(i)) = set.x.row(static_cast<Index>(rows[i])).transpose();
    return X;
}

double cluster_weight(const std::map<int, double>& weights, int cluster) {
    auto it = weights.find(cluster);
    return it == weights.end() ? 1.0 : it->second;
}

void write_u32(std::ostream& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.put(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void write_u64(std::ostream& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.put(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::uint64_t read_uint(std::istream& in, int bytes) {
    std::uint64_t v = 0;
    for (int i = 0; i < bytes; ++i) {
        const int c = in.get();
        if (c == std::char_traits<char>::eof()) throw Error(ErrorCode::Malformed, "truncated parameter file");
        v |= static_cast<std::uint64_t>(static_cast<unsigned char>(c)) << (8 * i);
    }
    return v;
}

template <typename T>
T get_or(const nlohmann::json& doc, const char* key, T fallback) {
    return doc.contains(key) ? doc.at(key).get<T>() : fallback;
}

}  // namespace

void NetConfig::validate() const {
    auto fail = [](const std::string& what) { throw Error(ErrorCode::InvalidArgument, "net config: " + what); };
    if (input_dim < 1 || hidden_dim < 1 || latent_dim < 1 || embedding_dim < 1 || attention_dim < 1 || head_dim < 1) {
        fail("layer sizes must be >= 1");
    }
    if (attention_heads != 1) fail("only a single attention head is implemented");
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) fail("learning_rate must be finite and >= 0");
    if (max_epochs < 1) fail("max_epochs must be >= 1");
    if (patience < 1) fail("patience must be >= 1");
    if (batch_size < 1) fail("batch_size must be >= 1");
    const auto& lw = loss_weights;
    if (lw.bound < 0 || lw.dist < 0 || lw.coh < 0 || lw.recon < 0) fail("loss weights must be >= 0");
    if (lw.bound + lw.dist + lw.coh == 0.0) fail("bound, dist and coh weights cannot all be zero");
    if (!(target_spread > 0.0 && target_spread <= 1.0)) fail("target_spread must be in (0, 1]");
    if (!(validation_fraction >= 0.0 && validation_fraction < 1.0)) fail("validation_fraction must be in [0, 1)");
    for (const auto& [id, weight] : cluster_weights) {
        if (!(weight >= 0.0)) fail("cluster weight of " + std::to_string(id) + " must be >= 0");
    }
}

NetConfig config_from_json(const nlohmann::json& doc) {
    NetConfig c;
    try {
        c.input_dim = get_or(doc, "input_dim", c.input_dim);
        c.hidden_dim = get_or(doc, "hidden_dim", c.hidden_dim);
        c.latent_dim = get_or(doc, "latent_dim", c.latent_dim);
        c.embedding_dim = get_or(doc, "embedding_dim", c.embedding_dim);
        c.attention_dim = get_or(doc, "attention_dim", c.attention_dim);
        c.attention_heads = get_or(doc, "attention_heads", c.attention_heads);
        c.head_dim = get_or(doc, "head_dim", c.head_dim);
        c.seed = get_or(doc, "seed", c.seed);
        c.learning_rate = get_or(doc, "learning_rate", c.learning_rate);
        c.max_epochs = get_or(doc, "max_epochs", c.max_epochs);
        c.patience = get_or(doc, "patience", c.patience);
        c.batch_size = get_or(doc, "batch_size", c.batch_size);
        c.target_spread = get_or(doc, "target_spread", c.target_spread);
        c.validation_fraction = get_or(doc, "validation_fraction", c.validation_fraction);
        if (doc.contains("loss_weights")) {
            const auto& lw = doc.at("loss_weights");
            c.loss_weights.bound = get_or(lw, "bound", c.loss_weights.bound);
            c.loss_weights.dist = get_or(lw, "dist", c.loss_weights.dist);
            c.loss_weights.coh = get_or(lw, "coh", c.loss_weights.coh);
            c.loss_weights.recon = get_or(lw, "recon", c.loss_weights.recon);
        }
        if (doc.contains("cluster_weights")) {
            for (const auto& [key, value] : doc.at("cluster_weights").items()) {
                c.cluster_weights[static_cast<int>(parse_i64(key))] = value.get<double>();
            }
        }
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::Malformed, std::string("net config: ") + e.what());
    }
    c.validate();
    return c;
}

NetConfig load_config(const std::string& path) { return config_from_json(load_config_document(path)); }

nlohmann::ordered_json to_json(const NetConfig& c) {
    nlohmann::ordered_json weights = nlohmann::ordered_json::object();
    for (const auto& [id, w] : c.cluster_weights) weights[std::to_string(id)] = w;
    nlohmann::ordered_json doc;
    doc["input_dim"] = c.input_dim;
    doc["hidden_dim"] = c.hidden_dim;
    doc["latent_dim"] = c.latent_dim;
    doc["embedding_dim"] = c.embedding_dim;
    doc["attention_dim"] = c.attention_dim;
    doc["attention_heads"] = c.attention_heads;
    doc["head_dim"] = c.head_dim;
    doc["seed"] = c.seed;
    doc["learning_rate"] = c.learning_rate;
    doc["max_epochs"] = c.max_epochs;
    doc["patience"] = c.patience;
    doc["batch_size"] = c.batch_size;
    doc["loss_weights"] = {{"bound", c.loss_weights.bound},
                           {"dist", c.loss_weights.dist},
                           {"coh", c.loss_weights.coh},
                           {"recon", c.loss_weights.recon}};
    doc["target_spread"] = c.target_spread;
    doc["validation_fraction"] = c.validation_fraction;
    doc["cluster_weights"] = std::move(weights);
    return doc;
}

std::size_t parameter_count(const NetParams& p) {
    const std::size_t d = static_cast<std::size_t>(p.input_dim), h = static_cast<std::size_t>(p.hidden_dim),
                      l = static_cast<std::size_t>(p.latent_dim), e = static_cast<std::size_t>(p.embedding_dim),
                      a = static_cast<std::size_t>(p.attention_dim), hh = static_cast<std::size_t>(p.head_dim),
                      n = static_cast<std::size_t>(p.n_clusters);
    return (h * d + h) + (l * h + l) + (h * l + h) + (d * h + d) + n * e + 3 * a * l + 2 * a * e + (hh * a + hh) +
           (hh + 1) + (hh * a + hh) + (d * hh + d);
}

NetParams init_params(const NetConfig& config, int n_clusters) {
    config.validate();
    if (n_clusters < 1) throw Error(ErrorCode::InvalidArgument, "network needs at least one cluster");
    NetParams p;
    p.input_dim = config.input_dim;
    p.hidden_dim = config.hidden_dim;
    p.latent_dim = config.latent_dim;
    p.embedding_dim = config.embedding_dim;
    p.attention_dim = config.attention_dim;
    p.head_dim = config.head_dim;
    p.n_clusters = n_clusters;
    p.seed = config.seed;
    p.values = VectorXd::Zero(static_cast<Index>(parameter_count(p)));

    Rng rng(derive_seed(config.seed, 0x1A17));
    Blocks<double> w(p.values.data(), p);
    auto xavier = [&](auto& m) {
        const double limit = std::sqrt(6.0 / static_cast<double>(m.rows() + m.cols()));
        for (Index r = 0; r < m.rows(); ++r) {
            for (Index c = 0; c < m.cols(); ++c) m(r, c) = rng.uniform(-limit, limit);
        }
    };
    xavier(w.W1);
    xavier(w.W2);
    xavier(w.W3);
    xavier(w.W4);
    xavier(w.E);
    xavier(w.Wq);
    xavier(w.Wk1);
    xavier(w.Wv1);
    xavier(w.Wk2);
    xavier(w.Wv2);
    xavier(w.Ws1);
    const double limit = std::sqrt(6.0 / static_cast<double>(p.head_dim + 1));
    for (Index i = 0; i < w.ws2.size(); ++i) w.ws2(i) = rng.uniform(-limit, limit);
    xavier(w.Wa1);
    xavier(w.Wa2);
    return p;
}

void write_params(std::ostream& out, const NetParams& p) {
    out.write(kMagic, 4);
    write_u32(out, kFormatVersion);
    for (int dim : {p.input_dim, p.hidden_dim, p.latent_dim, p.embedding_dim, p.attention_dim, p.head_dim, p.n_clusters}) {
        write_u64(out, static_cast<std::uint64_t>(dim));
    }
    write_u64(out, p.seed);
    write_u64(out, static_cast<std::uint64_t>(p.values.size()));
    for (Index i = 0; i < p.values.size(); ++i) write_u64(out, std::bit_cast<std::uint64_t>(p.values(i)));
    if (!out) throw Error(ErrorCode::Io, "failed writing parameters");
}

NetParams read_params(std::istream& in) {
    char magic[4] = {};
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kMagic, 4) != 0) throw Error(ErrorCode::Malformed, "not a parameter file");
    const auto version = read_uint(in, 4);
    if (version != kFormatVersion) throw Error(ErrorCode::Malformed, "unsupported parameter file version " + std::to_string(version));
    NetParams p;
    for (int* dim : {&p.input_dim, &p.hidden_dim, &p.latent_dim, &p.embedding_dim, &p.attention_dim, &p.head_dim, &p.n_clusters}) {
        *dim = static_cast<int>(read_uint(in, 8));
    }
    p.seed = read_uint(in, 8);
    const auto count = read_uint(in, 8);
    if (count != parameter_count(p)) throw Error(ErrorCode::Malformed, "parameter count does not match dimensions");
    p.values.resize(static_cast<Index>(count));
    for (Index i = 0; i < p.values.size(); ++i) {
        p.values(i) = std::bit_cast<double>(read_uint(in, 8));
        if (!std::isfinite(p.values(i))) throw Error(ErrorCode::Malformed, "non-finite parameter");
    }
    return p;
}

ScoreOutput forward(const NetParams& params, const VectorXd& x, int cluster_id) {
    if (x.size() != params.input_dim) throw Error(ErrorCode::SchemaMismatch, "feature vector has the wrong length");
    const auto a = run_forward(params, MatrixXd(x), {cluster_id});
    ScoreOutput out;
    out.raw_score = a.S(0);
    out.feature_weights.assign(a.A.data(), a.A.data() + a.A.rows());
    out.attention = {a.alpha1(0), a.alpha2(0)};
    return out;
}

double continuous_score(double s, const label::ScoreInterval& interval) {
    return interval.lower + (s + 1.0) / 2.0 * (interval.upper - interval.lower);
}

int scale_score(double s, const label::ScoreInterval& interval) {
    const auto z = std::lround(continuous_score(std::clamp(s, -1.0, 1.0), interval));
    return static_cast<int>(std::clamp<long>(z, kMinScore, kMaxScore));
}

ClusterImportance observed_importance(const MatrixXd& x, const std::vector<int>& labels, double eps) {
    if (static_cast<std::size_t>(x.rows()) != labels.size()) throw Error(ErrorCode::InvalidArgument, "rows/labels size mismatch");
    std::map<int, std::vector<Index>> members;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] >= 0) members[labels[i]].push_back(static_cast<Index>(i));
    }
    if (members.size() < 2) throw Error(ErrorCode::SingleCluster, "importance needs at least two clusters");

    std::vector<Index> all;
    for (const auto& [_, rows] : members) all.insert(all.end(), rows.begin(), rows.end());
    const auto n = static_cast<double>(all.size());
    VectorXd mean = VectorXd::Zero(x.cols());
    for (auto r : all) mean += x.row(r).transpose();
    mean /= n;
    VectorXd var = VectorXd::Zero(x.cols());
    for (auto r : all) var += (x.row(r).transpose() - mean).array().square().matrix();
    const VectorXd std = (var / n).array().sqrt().matrix();

    ClusterImportance out;
    for (const auto& [id, rows] : members) {
        VectorXd cmean = VectorXd::Zero(x.cols());
        for (auto r : rows) cmean += x.row(r).transpose();
        cmean /= static_cast<double>(rows.size());
        VectorXd imp = (cmean - mean).array().abs() / (std.array() + eps) + eps;
        imp /= imp.sum();
        out.by_cluster[id] = std::vector<double>(imp.data(), imp.data() + imp.size());
    }
    return out;
}

double boundary_loss(const std::vector<double>& zscores, const std::vector<label::ScoreInterval>& intervals) {
    if (zscores.empty()) return 0.0;
    double total = 0.0;
    for (std::size_t i = 0; i < zscores.size(); ++i) {
        const double lo = intervals[i].lower, hi = intervals[i].upper;
        total += (std::max(0.0, lo - zscores[i]) + std::max(0.0, zscores[i] - hi)) / (hi - lo);
    }
    return total / static_cast<double>(zscores.size());
}

double distribution_loss(const std::vector<double>& zscores, const std::vector<int>& clusters,
                         const std::vector<label::ScoreInterval>& intervals, double target_spread,
                         const std::map<int, double>& cluster_weights) {
    std::map<int, std::vector<std::size_t>> members;
    for (std::size_t i = 0; i < zscores.size(); ++i) members[clusters[i]].push_back(i);
    double total = 0.0;
    int counted = 0;
    for (const auto& [id, rows] : members) {
        if (rows.size() < 2) continue;
        double lo = zscores[rows[0]], hi = zscores[rows[0]];
        for (auto r : rows) {
            lo = std::min(lo, zscores[r]);
            hi = std::max(hi, zscores[r]);
        }
        const auto& interval = intervals[rows[0]];
        const double achieved = (hi - lo) / (interval.upper - interval.lower);
        const double deficit = std::max(0.0, target_spread - achieved);
        total += cluster_weight(cluster_weights, id) * deficit * deficit;
        ++counted;
    }
    return counted == 0 ? 0.0 : total / counted;
}

double coherence_loss(const std::vector<std::vector<double>>& weights, const std::vector<int>& clusters,
                      const ClusterImportance& importance) {
    if (weights.empty()) return 0.0;
    double total = 0.0;
    for (std::size_t i = 0; i < weights.size(); ++i) {
        const auto& target = importance.by_cluster.at(clusters[i]);
        double row = 0.0;
        for (std::size_t j = 0; j < target.size(); ++j) row += (weights[i][j] - target[j]) * (weights[i][j] - target[j]);
        total += row / static_cast<double>(target.size());
    }
    return total / static_cast<double>(weights.size());
}

TrainingSet make_training_set(const label::LabeledDataset& labeled, const features::ScalingParams& scaling) {
    TrainingSet set;
    std::vector<features::UserFeatureVector> vectors;
    vectors.reserve(labeled.rows.size());
    int max_cluster = -1;
    for (const auto& row : labeled.rows) {
        vectors.push_back(row.features);
        set.wallets.push_back(row.features.wallet);
        set.clusters.push_back(row.cluster_id);
        set.intervals.push_back(row.interval);
        set.pinned.push_back(row.pinned);
        if (row.cluster_id < 0) throw Error(ErrorCode::UnknownCluster, "negative cluster id for " + row.features.wallet);
        max_cluster = std::max(max_cluster, row.cluster_id);
    }
    set.x = features::apply_scaling(features::raw_matrix(vectors), scaling);
    set.n_clusters = max_cluster + 1;
    return set;
}

LossBreakdown evaluate_batch(const NetParams& params, const TrainingSet& set, const std::vector<std::size_t>& rows,
                             const ClusterImportance& importance, const NetConfig& config, VectorXd* gradient) {
    LossBreakdown loss;
    if (rows.empty()) return loss;
    const auto B = static_cast<Index>(rows.size());
    const double inv_b = 1.0 / static_cast<double>(B);
    const auto d = static_cast<double>(params.input_dim);
    std::vector<int> clusters(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) clusters[i] = set.clusters[rows[i]];

    const auto a = run_forward(params, gather_columns(set, rows), clusters);
    const auto& lw = config.loss_weights;
    RowVectorXd dS = RowVectorXd::Zero(B);

    // Boundary: relative distance outside the interval.
    for (Index i = 0; i < B; ++i) {
        const auto& iv = set.intervals[rows[static_cast<std::size_t>(i)]];
        const double width = iv.upper - iv.lower;
        const double z = continuous_score(a.S(i), iv);
        if (z < iv.lower) {
            loss.bound += (iv.lower - z) / width * inv_b;
            dS(i) -= lw.bound * 0.5 * inv_b;
        } else if (z > iv.upper) {
            loss.bound += (z - iv.upper) / width * inv_b;
            dS(i) += lw.bound * 0.5 * inv_b;
        }
    }

    // Distribution: squared hinge on each cluster's achieved spread. The achieved
    // spread (z_max - z_min) / width equals (s_max - s_min) / 2.
    std::map<int, std::vector<Index>> members;
    for (Index i = 0; i < B; ++i) members[clusters[static_cast<std::size_t>(i)]].push_back(i);
    int counted = 0;
    for (const auto& [id, idx] : members) counted += idx.size() >= 2 ? 1 : 0;
    for (const auto& [id, idx] : members) {
        if (idx.size() < 2) continue;
        Index imax = idx[0], imin = idx[0];
        for (auto i : idx) {
            if (a.S(i) > a.S(imax)) imax = i;
            if (a.S(i) < a.S(imin)) imin = i;
        }
        const double deficit = std::max(0.0, config.target_spread - (a.S(imax) - a.S(imin)) / 2.0);
        const double weight = cluster_weight(config.cluster_weights, id) / counted;
        loss.dist += weight * deficit * deficit;
        dS(imax) -= lw.dist * weight * deficit;
        dS(imin) += lw.dist * weight * deficit;
    }

    // Coherence against observed importance.
    MatrixXd target(a.A.rows(), B);
    for (Index i = 0; i < B; ++i) {
        auto it = importance.by_cluster.find(clusters[static_cast<std::size_t>(i)]);
        if (it == importance.by_cluster.end()) throw Error(ErrorCode::UnknownCluster, "no importance for a batch cluster");
        target.col(i) = Eigen::Map<const VectorXd>(it->second.data(), static_cast<Index>(it->second.size()));
    }
    const MatrixXd diff = a.A - target;
    loss.coh = diff.squaredNorm() * inv_b / d;
    const MatrixXd recon_diff = a.XR - a.X;
    loss.recon = recon_diff.squaredNorm() * inv_b / d;

    loss.total = lw.bound * loss.bound + lw.dist * loss.dist + lw.coh * loss.coh + lw.recon * loss.recon;

    if (gradient != nullptr) {
        gradient->setZero(params.values.size());
        const MatrixXd dA = diff * (2.0 * lw.coh * inv_b / d);
        const MatrixXd dXR = recon_diff * (2.0 * lw.recon * inv_b / d);
        run_backward(params, a, clusters, dS, dA, dXR, *gradient);
    }
    return loss;
}

nlohmann::ordered_json to_json(const TrainingReport& report) {
    nlohmann::ordered_json epochs = nlohmann::ordered_json::array();
    for (const auto& e : report.epochs) {
        epochs.push_back({{"epoch", e.epoch},
                          {"train_loss", e.train_loss},
                          {"validation_loss", e.validation.total},
                          {"validation_bound", e.validation.bound},
                          {"validation_dist", e.validation.dist},
                          {"validation_coh", e.validation.coh},
                          {"validation_recon", e.validation.recon}});
    }
    nlohmann::ordered_json doc;
    doc["batch_size"] = report.batch_size;
    doc["train_rows"] = report.train_rows;
    doc["validation_rows"] = report.validation_rows;
    doc["epochs_run"] = report.epochs.size();
    doc["best_epoch"] = report.best_epoch;
    doc["best_validation_loss"] = report.best_validation_loss;
    doc["stopped_early"] = report.stopped_early;
    doc["epochs"] = std::move(epochs);
    return doc;
}

std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_rows(const TrainingSet& set, const NetConfig& config) {
    std::map<int, std::vector<std::size_t>> members;
    for (std::size_t i = 0; i < set.clusters.size(); ++i) {
        if (!set.pinned[i]) members[set.clusters[i]].push_back(i);
    }
    Rng rng(derive_seed(config.seed, 0x5B17));
    std::vector<std::size_t> train_rows, validation_rows;
    for (auto& [id, rows] : members) {
        rng.shuffle(rows);
        auto n_val = static_cast<std::size_t>(std::lround(config.validation_fraction * static_cast<double>(rows.size())));
        n_val = std::min(n_val, rows.size() - 1);
        validation_rows.insert(validation_rows.end(), rows.begin(), rows.begin() + static_cast<std::ptrdiff_t>(n_val));
        train_rows.insert(train_rows.end(), rows.begin() + static_cast<std::ptrdiff_t>(n_val), rows.end());
    }
    std::sort(train_rows.begin(), train_rows.end());
    std::sort(validation_rows.begin(), validation_rows.end());
    return {train_rows, validation_rows};
}

// One epoch of batches. Each cluster's shuffled rows are cut into chunks of at
// least two and the chunks are dealt to random batches, so a cluster seen in a
// batch always contributes a spread term there.
static std::vector<std::vector<std::size_t>> make_batches(const TrainingSet& set, const std::vector<std::size_t>& rows,
                                                          std::size_t batch, Rng& rng) {
    const std::size_t n_batches = std::max<std::size_t>(1, (rows.size() + batch - 1) / batch);
    std::map<int, std::vector<std::size_t>> members;
    for (auto r : rows) members[set.clusters[r]].push_back(r);
    std::vector<std::vector<std::size_t>> chunks;
    for (auto& [id, list] : members) {
        rng.shuffle(list);
        const std::size_t size = std::max<std::size_t>(2, (list.size() + n_batches - 1) / n_batches);
        std::size_t start = 0;
        while (start < list.size()) {
            auto end = std::min(list.size(), start + size);
            if (list.size() - end == 1) end = list.size();  // no singleton tail
            chunks.emplace_back(list.begin() + static_cast<std::ptrdiff_t>(start), list.begin() + static_cast<std::ptrdiff_t>(end));
            start = end;
        }
    }
    rng.shuffle(chunks);
    std::vector<std::vector<std::size_t>> batches(n_batches);
    std::size_t next = 0;
    for (auto& chunk : chunks) {
        // Fill batches round-robin; a full batch is skipped when another has room.
        for (std::size_t tries = 0; tries < n_batches && batches[next].size() >= batch; ++tries) next = (next + 1) % n_batches;
        batches[next].insert(batches[next].end(), chunk.begin(), chunk.end());
        next = (next + 1) % n_batches;
    }
    std::erase_if(batches, [](const auto& b) { return b.empty(); });
    for (auto& b : batches) std::sort(b.begin(), b.end());
    return batches;
}

std::pair<NetParams, TrainingReport> train(const TrainingSet& set, const NetConfig& config) {
    config.validate();
    if (set.x.cols() != config.input_dim) throw Error(ErrorCode::SchemaMismatch, "training rows do not match input_dim");
    auto [train_rows, validation_rows] = split_rows(set, config);
    if (train_rows.empty()) throw Error(ErrorCode::InsufficientData, "no trainable rows");
    const auto& monitor = validation_rows.empty() ? train_rows : validation_rows;

    std::vector<int> labels;
    std::vector<Index> unpinned;
    for (std::size_t i = 0; i < set.clusters.size(); ++i) {
        if (!set.pinned[i]) {
            labels.push_back(set.clusters[i]);
            unpinned.push_back(static_cast<Index>(i));
        }
    }
    const auto importance = observed_importance(set.x(unpinned, Eigen::all), labels);

    NetParams params = init_params(config, set.n_clusters);
    NetParams best = params;
    TrainingReport report;
    report.batch_size = config.batch_size;
    report.train_rows = train_rows.size();
    report.validation_rows = validation_rows.size();
    report.validation_indices = validation_rows;
    report.best_validation_loss = std::numeric_limits<double>::infinity();

    const Index n = params.values.size();
    VectorXd m = VectorXd::Zero(n), v = VectorXd::Zero(n), gradient(n);
    constexpr double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
    std::uint64_t step = 0;
    Rng rng(derive_seed(config.seed, 0xBA7C));
    int stale = 0;
    const auto batch = static_cast<std::size_t>(config.batch_size);

    for (int epoch = 1; epoch <= config.max_epochs; ++epoch) {
        double train_total = 0.0;
        for (const auto& rows : make_batches(set, train_rows, batch, rng)) {
            const auto loss = evaluate_batch(params, set, rows, importance, config, &gradient);
            if (!std::isfinite(loss.total) || !gradient.allFinite()) {
                throw Error(ErrorCode::Diverged, "non-finite training loss at epoch " + std::to_string(epoch));
            }
            train_total += loss.total * static_cast<double>(rows.size());
            ++step;
            m = beta1 * m + (1.0 - beta1) * gradient;
            v = beta2 * v + (1.0 - beta2) * gradient.cwiseProduct(gradient);
            const double c1 = 1.0 - std::pow(beta1, static_cast<double>(step));
            const double c2 = 1.0 - std::pow(beta2, static_cast<double>(step));
            params.values.array() -= config.learning_rate * (m.array() / c1) / ((v.array() / c2).sqrt() + adam_eps);
        }

        EpochRecord record;
        record.epoch = epoch;
        record.train_loss = train_total / static_cast<double>(train_rows.size());
        record.validation = evaluate_batch(params, set, monitor, importance, config);
        if (!std::isfinite(record.validation.total)) {
            throw Error(ErrorCode::Diverged, "non-finite validation loss at epoch " + std::to_string(epoch));
        }
        report.epochs.push_back(record);

        if (record.validation.total < report.best_validation_loss) {
            report.best_validation_loss = record.validation.total;
            report.best_epoch = epoch;
            best = params;
            stale = 0;
        } else if (++stale >= config.patience) {
            report.stopped_early = true;
            break;
        }
    }
    return {best, report};
}

SweepReport batch_size_sweep(const TrainingSet& set, const NetConfig& config, const std::vector<int>& sizes,
                             const std::map<int, int>& max_epochs) {
    std::set<int> seen;
    for (int size : sizes) {
        if (std::find(kSweepBatchSizes.begin(), kSweepBatchSizes.end(), size) == kSweepBatchSizes.end()) {
            throw Error(ErrorCode::InvalidArgument, "batch size " + std::to_string(size) + " is not in the sweep set");
        }
        if (!seen.insert(size).second) throw Error(ErrorCode::InvalidArgument, "batch size listed twice");
    }
    if (sizes.empty()) throw Error(ErrorCode::InvalidArgument, "no batch sizes to sweep");

    SweepReport report;
    double best = std::numeric_limits<double>::infinity();
    for (int size : sizes) {
        NetConfig c = config;
        c.batch_size = size;
        if (auto it = max_epochs.find(size); it != max_epochs.end()) c.max_epochs = it->second;
        const auto result = train(set, c).second;
        report.entries.push_back({size, result.best_validation_loss, static_cast<int>(result.epochs.size())});
        if (result.best_validation_loss < best || (result.best_validation_loss == best && size > report.chosen)) {
            best = result.best_validation_loss;
            report.chosen = size;
        }
    }
    return report;
}

std::vector<ScoredRow> score_all(const NetParams& params, const TrainingSet& set, const label::RulePolicy& policy) {
    std::vector<std::size_t> scored;
    for (std::size_t i = 0; i < set.wallets.size(); ++i) {
        if (!set.pinned[i]) scored.push_back(i);
    }
    std::vector<int> clusters;
    for (auto i : scored) clusters.push_back(set.clusters[i]);
    const auto a = run_forward(params, gather_columns(set, scored), clusters);

    std::vector<ScoredRow> out(set.wallets.size());
    for (std::size_t i = 0; i < set.wallets.size(); ++i) {
        out[i].wallet = set.wallets[i];
        out[i].cluster_id = set.clusters[i];
        if (set.pinned[i]) {
            out[i].pinned = true;
            out[i].zscore = policy.zero_interaction_score;
        }
    }
    for (std::size_t k = 0; k < scored.size(); ++k) {
        const auto i = scored[k];
        const auto col = static_cast<Index>(k);
        auto& row = out[i];
        row.raw_score = a.S(col);
        row.zscore = scale_score(a.S(col), set.intervals[i]);
        row.feature_weights.assign(a.A.col(col).data(), a.A.col(col).data() + a.A.rows());
        row.closed_form = set.intervals[i].lower * a.A.col(col).dot(set.x.row(static_cast<Index>(i)).transpose());
    }
    std::sort(out.begin(), out.end(), [](const auto& x, const auto& y) { return x.wallet < y.wallet; });
    return out;
}

void write_scores_jsonl(std::ostream& out, const std::vector<ScoredRow>& rows) {
    for (const auto& r : rows) {
        nlohmann::ordered_json doc;
        doc["wallet"] = r.wallet;
        doc["zscore"] = r.zscore;
        doc["cluster_id"] = r.cluster_id;
        doc["feature_weights"] = r.feature_weights;
        doc["raw_score"] = r.raw_score;
        doc["closed_form"] = r.closed_form;
        doc["pinned"] = r.pinned;
        out << doc.dump() << '\n';
    }
}

std::vector<ScoredRow> read_scores_jsonl(std::istream& in) {
    std::vector<ScoredRow> rows;
    std::string line;
    std::size_t number = 0;
    while (std::getline(in, line)) {
        ++number;
        if (line.empty()) continue;
        try {
            const auto doc = nlohmann::json::parse(line);
            ScoredRow r;
            r.wallet = doc.at("wallet").get<std::string>();
            r.zscore = doc.at("zscore").get<int>();
            r.cluster_id = doc.at("cluster_id").get<int>();
            r.feature_weights = doc.at("feature_weights").get<std::vector<double>>();
            r.raw_score = doc.value("raw_score", 0.0);
            r.closed_form = doc.value("closed_form", 0.0);
            r.pinned = doc.value("pinned", false);
            rows.push_back(std::move(r));
        } catch (const nlohmann::json::exception& e) {
            throw Error(ErrorCode::Malformed, "scores line " + std::to_string(number) + ": " + e.what());
        }
    }
    return rows;
}

}  // namespace zscore::net

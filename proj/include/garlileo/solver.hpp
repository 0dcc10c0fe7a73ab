#pragma once

// Dense Levenberg-Marquardt over Euclidean and rotation parameter blocks,
// with per-row Cauchy loss and Schur-complement marginalization.

#include "garlileo/lie.hpp"
#include "garlileo/log.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace garlileo {

using BlockId = std::uint64_t;

inline BlockId make_block_id(std::uint64_t group, std::uint64_t index) { return (group << 48) | index; }

enum class BlockKind { Euclidean, Rotation };

/// Rotation blocks hold 4 doubles in Eigen quaternion order (x, y, z, w) and
/// are updated as q <- q * Exp(delta).
struct ParameterBlock {
  BlockId id = 0;
  double* data = nullptr;
  int size = 0;     // ambient
  int tangent = 0;  // local
  BlockKind kind = BlockKind::Euclidean;
  bool fixed = false;
};

struct ResidualBlock {
  std::string name;
  std::vector<BlockId> blocks;
  int dim = 0;
  std::function<bool(const double* const*, double*)> fn;
  double weight = 1.0;
  double cauchy_scale = 0.0;  // > 0 applies the Cauchy loss per row
};

/// IRLS row weight sqrt(rho'(s)) of the Cauchy loss rho(s) = c^2 log(1 + s/c^2), s = e^2.
inline double cauchy_weight(double e, double c) {
  if (!(c > 0.0)) throw std::invalid_argument("cauchy_weight: scale must be positive");
  return 1.0 / std::sqrt(1.0 + e * e / (c * c));
}

inline double cauchy_rho(double s, double c) { return c * c * std::log1p(s / (c * c)); }

inline int thread_count() {
  if (const char* env = std::getenv("GARLILEO_THREADS")) {
    const int n = std::atoi(env);
    if (n > 0) return n;
  }
  return 1;
}

/// Runs f(i) for i in [0, n). Work is partitioned statically so results do
/// not depend on the thread count.
template <typename F>
void parallel_for(std::size_t n, F&& f) {
  const auto threads = static_cast<std::size_t>(std::max(1, thread_count()));
  if (threads <= 1 || n < 2 * threads) {
    for (std::size_t i = 0; i < n; ++i) f(i);
    return;
  }
  std::vector<std::thread> pool;
  const std::size_t chunk = (n + threads - 1) / threads;
  for (std::size_t t = 0; t < threads; ++t) {
    const std::size_t lo = t * chunk, hi = std::min(n, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([lo, hi, &f] {
      for (std::size_t i = lo; i < hi; ++i) f(i);
    });
  }
  for (auto& th : pool) th.join();
}

class Problem {
 public:
  void add_euclidean(BlockId id, double* data, int size) { add_block(id, data, size, size, BlockKind::Euclidean); }
  void add_rotation(BlockId id, Quat* q) { add_block(id, q->coeffs().data(), 4, 3, BlockKind::Rotation); }

  void set_fixed(BlockId id, bool fixed = true) { block(id).fixed = fixed; }
  bool has_block(BlockId id) const { return index_.count(id) > 0; }
  const ParameterBlock& block(BlockId id) const {
    auto it = index_.find(id);
    if (it == index_.end()) throw std::out_of_range("Problem: unknown parameter block");
    return blocks_[it->second];
  }
  ParameterBlock& block(BlockId id) {
    auto it = index_.find(id);
    if (it == index_.end()) throw std::out_of_range("Problem: unknown parameter block");
    return blocks_[it->second];
  }

  void add_residual(ResidualBlock rb) {
    if (!rb.fn || rb.dim <= 0) throw std::invalid_argument("Problem: residual block needs fn and dim");
    for (auto id : rb.blocks)
      if (!has_block(id)) throw std::invalid_argument("Problem: residual '" + rb.name + "' references unknown block");
    residuals_.push_back(std::move(rb));
  }

  const std::vector<ParameterBlock>& blocks() const { return blocks_; }
  const std::vector<ResidualBlock>& residuals() const { return residuals_; }
  std::vector<ResidualBlock>& residuals() { return residuals_; }

 private:
  void add_block(BlockId id, double* data, int size, int tangent, BlockKind kind) {
    if (index_.count(id)) throw std::invalid_argument("Problem: duplicate parameter block");
    index_[id] = blocks_.size();
    blocks_.push_back(ParameterBlock{id, data, size, tangent, kind, false});
  }

  std::vector<ParameterBlock> blocks_;
  std::map<BlockId, std::size_t> index_;
  std::vector<ResidualBlock> residuals_;
};

namespace solver_detail {

inline void plus(const ParameterBlock& b, const double* x, const double* delta, double* out) {
  if (b.kind == BlockKind::Euclidean) {
    for (int i = 0; i < b.size; ++i) out[i] = x[i] + delta[i];
    return;
  }
  Eigen::Map<const Quat> q(x);
  Eigen::Map<Quat> r(out);
  r = (q * quat_exp(Vec3(delta[0], delta[1], delta[2]))).normalized();
}

/// Tangent difference x - x0 (rotation: Log(q0^-1 q)).
inline void minus(const ParameterBlock& b, const double* x, const double* x0, double* out) {
  if (b.kind == BlockKind::Euclidean) {
    for (int i = 0; i < b.size; ++i) out[i] = x[i] - x0[i];
    return;
  }
  Eigen::Map<const Quat> q(x), q0(x0);
  const Vec3 d = quat_log(q0.conjugate() * q);
  out[0] = d.x();
  out[1] = d.y();
  out[2] = d.z();
}

struct Linearized {
  Eigen::VectorXd r;  // robust- and weight-scaled
  std::vector<Eigen::MatrixXd> J;  // per referenced block, tangent columns (empty when fixed)
  double cost = 0.0;
  bool finite = true;
};

inline constexpr double kJacobianStep = 1e-6;

inline bool evaluate(const Problem& p, const ResidualBlock& rb, Eigen::VectorXd& raw) {
  std::vector<const double*> ptrs;
  ptrs.reserve(rb.blocks.size());
  for (auto id : rb.blocks) ptrs.push_back(p.block(id).data);
  raw.resize(rb.dim);
  if (!rb.fn(ptrs.data(), raw.data())) return false;
  return raw.allFinite();
}

inline double block_cost(const ResidualBlock& rb, const Eigen::VectorXd& raw) {
  const double w2 = rb.weight * rb.weight;
  if (rb.cauchy_scale > 0.0) {
    double c = 0.0;
    for (Eigen::Index i = 0; i < raw.size(); ++i) c += cauchy_rho(raw(i) * raw(i), rb.cauchy_scale);
    return 0.5 * w2 * c;
  }
  return 0.5 * w2 * raw.squaredNorm();
}

/// Central-difference Jacobians on local copies of the parameters.
inline Linearized linearize(const Problem& p, const ResidualBlock& rb) {
  Linearized out;
  const std::size_t nb = rb.blocks.size();
  std::vector<std::vector<double>> local(nb);
  std::vector<const double*> ptrs(nb);
  for (std::size_t k = 0; k < nb; ++k) {
    const auto& b = p.block(rb.blocks[k]);
    local[k].assign(b.data, b.data + b.size);
    ptrs[k] = local[k].data();
  }
  Eigen::VectorXd raw(rb.dim);
  if (!rb.fn(ptrs.data(), raw.data()) || !raw.allFinite()) {
    out.finite = false;
    return out;
  }
  out.cost = block_cost(rb, raw);
  out.J.resize(nb);
  Eigen::VectorXd rp(rb.dim), rm(rb.dim);
  for (std::size_t k = 0; k < nb; ++k) {
    const auto& b = p.block(rb.blocks[k]);
    if (b.fixed) continue;
    out.J[k].resize(rb.dim, b.tangent);
    const std::vector<double> x0 = local[k];
    std::vector<double> delta(static_cast<std::size_t>(b.tangent), 0.0);
    for (int c = 0; c < b.tangent; ++c) {
      const double h = b.kind == BlockKind::Euclidean ? kJacobianStep * std::max(1.0, std::abs(x0[c])) : kJacobianStep;
      delta[c] = h;
      plus(b, x0.data(), delta.data(), local[k].data());
      const bool okp = rb.fn(ptrs.data(), rp.data());
      delta[c] = -h;
      plus(b, x0.data(), delta.data(), local[k].data());
      const bool okm = rb.fn(ptrs.data(), rm.data());
      delta[c] = 0.0;
      local[k] = x0;
      if (!okp || !okm) {
        out.finite = false;
        return out;
      }
      out.J[k].col(c) = (rp - rm) / (2.0 * h);
    }
  }
  // Weighting: w * sqrt(rho'(e^2)) per row.
  Eigen::VectorXd s = Eigen::VectorXd::Constant(rb.dim, rb.weight);
  if (rb.cauchy_scale > 0.0)
    for (Eigen::Index i = 0; i < rb.dim; ++i) s(i) *= cauchy_weight(raw(i), rb.cauchy_scale);
  out.r = s.cwiseProduct(raw);
  for (auto& j : out.J)
    if (j.size() > 0) j = s.asDiagonal() * j;
  out.finite = out.r.allFinite();
  for (const auto& j : out.J) out.finite = out.finite && j.allFinite();
  return out;
}

}  // namespace solver_detail

struct SolverOptions {
  int max_iters = 50;
  double lambda_init = 1e-4;
  double tol_dx = 1e-10;
  double tol_cost = 1e-12;
  double tol_grad = 1e-14;
  double lambda_max = 1e16;
};

struct SolveSummary {
  bool ok = true;
  bool converged = false;
  int iterations = 0;
  int accepted = 0;
  double initial_cost = 0.0;
  double final_cost = 0.0;
  std::vector<double> cost_history;  // accepted costs, starting with the initial cost
  std::string message;
};

/// Total robust cost at the current parameter values. Sets `bad` to the name
/// of the first non-finite residual block, if any.
inline double total_cost(const Problem& p, std::string* bad = nullptr) {
  double cost = 0.0;
  Eigen::VectorXd raw;
  for (const auto& rb : p.residuals()) {
    if (!solver_detail::evaluate(p, rb, raw)) {
      if (bad) *bad = rb.name;
      return std::numeric_limits<double>::infinity();
    }
    cost += solver_detail::block_cost(rb, raw);
  }
  return cost;
}

/// Tangent-space layout of the free blocks.
struct TangentLayout {
  std::map<BlockId, int> offset;
  int dim = 0;
  explicit TangentLayout(const Problem& p) {
    for (const auto& b : p.blocks()) {
      if (b.fixed) continue;
      offset[b.id] = dim;
      dim += b.tangent;
    }
  }
};

/// Gauss-Newton system H = J^T J, g = J^T r over free blocks.
inline bool build_normal_equations(const Problem& p, const TangentLayout& lay, Eigen::MatrixXd& H,
                                   Eigen::VectorXd& g, double& cost, std::string* bad = nullptr) {
  const auto& res = p.residuals();
  std::vector<solver_detail::Linearized> lin(res.size());
  parallel_for(res.size(), [&](std::size_t i) { lin[i] = solver_detail::linearize(p, res[i]); });
  H.setZero(lay.dim, lay.dim);
  g.setZero(lay.dim);
  cost = 0.0;
  for (std::size_t i = 0; i < res.size(); ++i) {
    const auto& l = lin[i];
    if (!l.finite) {
      if (bad) *bad = res[i].name;
      return false;
    }
    cost += l.cost;
    const auto& ids = res[i].blocks;
    for (std::size_t a = 0; a < ids.size(); ++a) {
      if (l.J[a].size() == 0) continue;
      const int oa = lay.offset.at(ids[a]);
      g.segment(oa, l.J[a].cols()) += l.J[a].transpose() * l.r;
      for (std::size_t b = 0; b < ids.size(); ++b) {
        if (l.J[b].size() == 0) continue;
        const int ob = lay.offset.at(ids[b]);
        H.block(oa, ob, l.J[a].cols(), l.J[b].cols()) += l.J[a].transpose() * l.J[b];
      }
    }
  }
  return true;
}

inline SolveSummary solve(Problem& p, const SolverOptions& opt = {}) {
  SolveSummary sum;
  const TangentLayout lay(p);
  std::string bad;
  double cost = total_cost(p, &bad);
  sum.initial_cost = sum.final_cost = cost;
  sum.cost_history.push_back(cost);
  if (!std::isfinite(cost)) {
    sum.ok = false;
    sum.message = "non-finite residual in block '" + bad + "'";
    return sum;
  }
  if (lay.dim == 0) {
    sum.converged = true;
    return sum;
  }

  // Snapshot / restore of the free parameters.
  auto snapshot = [&] {
    std::vector<std::vector<double>> s;
    for (const auto& b : p.blocks()) s.emplace_back(b.data, b.data + b.size);
    return s;
  };
  auto restore = [&](const std::vector<std::vector<double>>& s) {
    for (std::size_t i = 0; i < p.blocks().size(); ++i) std::copy(s[i].begin(), s[i].end(), p.blocks()[i].data);
  };

  double lambda = opt.lambda_init;
  Eigen::MatrixXd H;
  Eigen::VectorXd g;
  bool relinearize = true;
  for (int it = 0; it < opt.max_iters; ++it) {
    sum.iterations = it + 1;
    if (relinearize) {
      double lin_cost = 0.0;
      if (!build_normal_equations(p, lay, H, g, lin_cost, &bad)) {
        sum.ok = false;
        sum.message = "non-finite residual or Jacobian in block '" + bad + "'";
        return sum;
      }
      relinearize = false;
      if (g.lpNorm<Eigen::Infinity>() < opt.tol_grad) {
        sum.converged = true;
        break;
      }
    }
    Eigen::MatrixXd A = H;
    for (int i = 0; i < lay.dim; ++i) A(i, i) += lambda * std::clamp(H(i, i), 1e-6, 1e32);
    Eigen::LDLT<Eigen::MatrixXd> ldlt(A);
    Eigen::VectorXd dx = ldlt.solve(-g);
    if (ldlt.info() != Eigen::Success || !dx.allFinite()) {
      lambda *= 4.0;
      if (lambda > opt.lambda_max) break;
      continue;
    }
    const auto saved = snapshot();
    for (const auto& b : p.blocks()) {
      if (b.fixed) continue;
      std::vector<double> x0(b.data, b.data + b.size);
      solver_detail::plus(b, x0.data(), dx.data() + lay.offset.at(b.id), b.data);
    }
    const double new_cost = total_cost(p);
    if (std::isfinite(new_cost) && new_cost <= cost) {
      const double rel = (cost - new_cost) / std::max(cost, 1e-300);
      cost = new_cost;
      sum.cost_history.push_back(cost);
      ++sum.accepted;
      lambda = std::max(lambda * 0.5, 1e-16);
      relinearize = true;
      if (dx.norm() < opt.tol_dx || rel < opt.tol_cost || cost == 0.0) {
        sum.converged = true;
        break;
      }
    } else {
      restore(saved);
      lambda *= 4.0;
      if (lambda > opt.lambda_max) {
        sum.converged = true;  // no descent direction left at machine precision
        break;
      }
    }
  }
  sum.final_cost = cost;
  return sum;
}

// --- marginalization ------------------------------------------------------

/// Gaussian prior on retained blocks: cost(dx) = 1/2 dx^T H dx - b^T dx, dx =
/// x - x_lin in tangent coordinates.
struct PriorFactor {
  std::vector<BlockId> ids;
  std::vector<int> tangent;
  std::vector<BlockKind> kinds;
  std::vector<std::vector<double>> x_lin;
  Eigen::MatrixXd H;
  Eigen::VectorXd b;
  std::vector<std::string> warnings;

  int dim() const { return static_cast<int>(H.rows()); }
  bool empty() const { return ids.empty(); }

  /// Stacked tangent deviation from the linearization point.
  Eigen::VectorXd delta(const double* const* params) const {
    Eigen::VectorXd d(dim());
    int off = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      ParameterBlock pb;
      pb.kind = kinds[k];
      pb.size = static_cast<int>(x_lin[k].size());
      solver_detail::minus(pb, params[k], x_lin[k].data(), d.data() + off);
      off += tangent[k];
    }
    return d;
  }

  /// H (x - x_lin) - b.
  Eigen::VectorXd linear_residual(const double* const* params) const { return H * delta(params) - b; }

  /// Square-root residual whose half squared norm equals the prior cost up
  /// to a constant: r = S^{1/2} V^T dx - S^{-1/2} V^T b with H = V S V^T.
  ResidualBlock as_residual(double weight = 1.0) const {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(H);
    const Eigen::VectorXd s = es.eigenvalues();
    const double smax = s.size() ? s.maxCoeff() : 0.0;
    std::vector<int> keep;
    for (Eigen::Index i = 0; i < s.size(); ++i)
      if (s(i) > 1e-12 * std::max(smax, 1e-300)) keep.push_back(static_cast<int>(i));
    Eigen::MatrixXd sqrt_vt(keep.size(), dim());
    Eigen::VectorXd rhs(keep.size());
    for (std::size_t r = 0; r < keep.size(); ++r) {
      const double sv = s(keep[r]);
      const Eigen::VectorXd v = es.eigenvectors().col(keep[r]);
      sqrt_vt.row(static_cast<Eigen::Index>(r)) = std::sqrt(sv) * v.transpose();
      rhs(static_cast<Eigen::Index>(r)) = v.dot(b) / std::sqrt(sv);
    }
    ResidualBlock rb;
    rb.name = "prior";
    rb.blocks = ids;
    rb.dim = std::max<int>(1, static_cast<int>(keep.size()));
    rb.weight = weight;
    const PriorFactor self = *this;
    rb.fn = [self, sqrt_vt, rhs](const double* const* params, double* out) {
      if (sqrt_vt.rows() == 0) {
        out[0] = 0.0;
        return true;
      }
      Eigen::Map<Eigen::VectorXd>(out, sqrt_vt.rows()) = sqrt_vt * self.delta(params) - rhs;
      return true;
    };
    return rb;
  }
};

/// Eliminates `drop` from the residual blocks that reference it. Blocks
/// connected to dropped ones through those residuals are retained in the
/// prior; fixed blocks are treated as constants.
inline PriorFactor marginalize(const Problem& p, const std::vector<BlockId>& drop) {
  std::map<BlockId, bool> is_drop;
  for (auto id : drop) {
    if (!p.has_block(id)) throw std::invalid_argument("marginalize: unknown block");
    is_drop[id] = true;
  }
  std::vector<std::size_t> involved;
  std::vector<BlockId> keep_ids;
  std::map<BlockId, bool> seen_keep;
  for (std::size_t i = 0; i < p.residuals().size(); ++i) {
    const auto& rb = p.residuals()[i];
    bool touches = false;
    for (auto id : rb.blocks) touches = touches || is_drop.count(id);
    if (!touches) continue;
    involved.push_back(i);
    for (auto id : rb.blocks) {
      if (is_drop.count(id) || p.block(id).fixed || seen_keep.count(id)) continue;
      seen_keep[id] = true;
      keep_ids.push_back(id);
    }
  }
  std::sort(keep_ids.begin(), keep_ids.end());

  std::map<BlockId, int> off;
  int na = 0, nb = 0;
  for (auto id : keep_ids) {
    off[id] = na;
    na += p.block(id).tangent;
  }
  std::vector<BlockId> drop_free;
  for (auto id : drop)
    if (!p.block(id).fixed) drop_free.push_back(id);
  for (auto id : drop_free) {
    off[id] = na + nb;
    nb += p.block(id).tangent;
  }
  const int n = na + nb;
  Eigen::MatrixXd H = Eigen::MatrixXd::Zero(n, n);
  Eigen::VectorXd bvec = Eigen::VectorXd::Zero(n);
  for (auto i : involved) {
    const auto& rb = p.residuals()[i];
    const auto l = solver_detail::linearize(p, rb);
    if (!l.finite) throw std::runtime_error("marginalize: non-finite residual in block '" + rb.name + "'");
    for (std::size_t a = 0; a < rb.blocks.size(); ++a) {
      if (l.J[a].size() == 0) continue;
      const int oa = off.at(rb.blocks[a]);
      bvec.segment(oa, l.J[a].cols()) -= l.J[a].transpose() * l.r;
      for (std::size_t c = 0; c < rb.blocks.size(); ++c) {
        if (l.J[c].size() == 0) continue;
        const int oc = off.at(rb.blocks[c]);
        H.block(oa, oc, l.J[a].cols(), l.J[c].cols()) += l.J[a].transpose() * l.J[c];
      }
    }
  }

  PriorFactor prior;
  const Eigen::MatrixXd Haa = H.topLeftCorner(na, na);
  const Eigen::MatrixXd Hab = H.topRightCorner(na, nb);
  Eigen::MatrixXd Hbb = H.bottomRightCorner(nb, nb);
  Hbb = 0.5 * (Hbb + Hbb.transpose());
  Eigen::LLT<Eigen::MatrixXd> llt(Hbb);
  auto singular = [&](const Eigen::LLT<Eigen::MatrixXd>& f, const Eigen::MatrixXd& m) {
    if (f.info() != Eigen::Success) return true;
    const Eigen::VectorXd d = f.matrixL().toDenseMatrix().diagonal();
    return nb > 0 && d.minCoeff() <= 1e-12 * std::max(1.0, std::sqrt(m.diagonal().maxCoeff()));
  };
  if (nb > 0 && singular(llt, Hbb)) {
    const std::string w = "marginalize: H_bb singular, adding 1e-9 I damping";
    prior.warnings.push_back(w);
    log_warn(w);
    Hbb += 1e-9 * Eigen::MatrixXd::Identity(nb, nb);
    llt.compute(Hbb);
    if (llt.info() != Eigen::Success) throw std::runtime_error("marginalize: H_bb singular after damping");
  }
  if (nb > 0) {
    prior.H = Haa - Hab * llt.solve(Hab.transpose());
    prior.b = bvec.head(na) - Hab * llt.solve(bvec.tail(nb));
  } else {
    prior.H = Haa;
    prior.b = bvec.head(na);
  }
  prior.H = (0.5 * (prior.H + prior.H.transpose())).eval();
  for (auto id : keep_ids) {
    const auto& blk = p.block(id);
    prior.ids.push_back(id);
    prior.tangent.push_back(blk.tangent);
    prior.kinds.push_back(blk.kind);
    prior.x_lin.emplace_back(blk.data, blk.data + blk.size);
  }
  return prior;
}

}  // namespace garlileo

#include "attnlab/autodiff.hpp"

#include <cmath>
#include <memory>
#include <limits>

#include "attnlab/error.hpp"

namespace attnlab::ad {

Var Tape::push(Matrix value, bool needs_grad, std::function<void(Tape&, int)> back) {
  Node n;
  n.value = std::move(value);
  n.needs_grad = record_ && needs_grad;
  if (n.needs_grad) n.back = std::move(back);
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

Var Tape::constant(Matrix value) { return push(std::move(value), false, {}); }

Var Tape::parameter(const Matrix& value) { return push(value, true, {}); }

Matrix& Tape::grad_ref(Var v) {
  auto& n = nodes_[static_cast<std::size_t>(v.id)];
  if (n.grad.size() == 0) n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

void Tape::backward(Var loss) {
  if (!record_) throw Error("backward on a non-recording tape");
  auto& l = nodes_[static_cast<std::size_t>(loss.id)];
  if (l.value.size() != 1) throw Error("backward needs a scalar loss");
  grad_ref(loss).setOnes();
  for (int id = loss.id; id >= 0; --id) {
    auto& n = nodes_[static_cast<std::size_t>(id)];
    if (n.back && n.grad.size() != 0) n.back(*this, id);
  }
}

namespace {
bool any_grad(const Tape& t, std::initializer_list<Var> vs) {
  for (auto v : vs)
    if (t.needs_grad(v)) return true;
  return false;
}
}  // namespace

Var matmul(Tape& t, Var a, Var b) {
  Matrix out = t.value(a) * t.value(b);
  return t.push(std::move(out), any_grad(t, {a, b}), [a, b](Tape& tp, int self) {
    const Matrix& g = tp.grad(Var{self});
    if (tp.needs_grad(a)) tp.grad_ref(a).noalias() += g * tp.value(b).transpose();
    if (tp.needs_grad(b)) tp.grad_ref(b).noalias() += tp.value(a).transpose() * g;
  });
}

Var add(Tape& t, Var a, Var b) {
  Matrix out = t.value(a) + t.value(b);
  return t.push(std::move(out), any_grad(t, {a, b}), [a, b](Tape& tp, int self) {
    const Matrix& g = tp.grad(Var{self});
    if (tp.needs_grad(a)) tp.grad_ref(a) += g;
    if (tp.needs_grad(b)) tp.grad_ref(b) += g;
  });
}

Var add_row(Tape& t, Var a, Var row) {
  Matrix out = t.value(a).rowwise() + t.value(row).row(0);
  return t.push(std::move(out), any_grad(t, {a, row}), [a, row](Tape& tp, int self) {
    const Matrix& g = tp.grad(Var{self});
    if (tp.needs_grad(a)) tp.grad_ref(a) += g;
    if (tp.needs_grad(row)) tp.grad_ref(row) += g.colwise().sum();
  });
}

Var gather_add(Tape& t, Var a, Var table, std::vector<int> index) {
  const Matrix& av = t.value(a);
  const Matrix& tv = t.value(table);
  if (static_cast<Eigen::Index>(index.size()) != av.rows()) throw Error("gather_add: index size mismatch");
  Matrix out = av;
  for (Eigen::Index r = 0; r < av.rows(); ++r) out.row(r) += tv.row(index[static_cast<std::size_t>(r)]);
  return t.push(std::move(out), any_grad(t, {a, table}),
                [a, table, index = std::move(index)](Tape& tp, int self) {
                  const Matrix& g = tp.grad(Var{self});
                  if (tp.needs_grad(a)) tp.grad_ref(a) += g;
                  if (tp.needs_grad(table)) {
                    Matrix& gt = tp.grad_ref(table);
                    for (Eigen::Index r = 0; r < g.rows(); ++r) gt.row(index[static_cast<std::size_t>(r)]) += g.row(r);
                  }
                });
}

Var relu(Tape& t, Var a) {
  Matrix out = t.value(a).cwiseMax(0.0);
  return t.push(std::move(out), t.needs_grad(a), [a](Tape& tp, int self) {
    const Matrix& g = tp.grad(Var{self});
    tp.grad_ref(a) += (tp.value(a).array() > 0.0).select(g, 0.0);
  });
}

Var layer_norm(Tape& t, Var x, Var gain, Var bias, double eps) {
  const Matrix& xv = t.value(x);
  const auto d = static_cast<double>(xv.cols());
  Eigen::VectorXd mean = xv.rowwise().mean();
  Matrix centered = xv.colwise() - mean;
  Eigen::VectorXd inv_std = ((centered.array().square().rowwise().sum() / d) + eps).rsqrt();
  Matrix xhat = centered.array().colwise() * inv_std.array();
  Matrix out = (xhat.array().rowwise() * t.value(gain).row(0).array()).matrix();
  out.rowwise() += t.value(bias).row(0);
  return t.push(std::move(out), any_grad(t, {x, gain, bias}),
                [x, gain, bias, xhat = std::move(xhat), inv_std = std::move(inv_std), d](Tape& tp, int self) {
                  const Matrix& g = tp.grad(Var{self});
                  if (tp.needs_grad(gain)) tp.grad_ref(gain) += (g.array() * xhat.array()).colwise().sum().matrix();
                  if (tp.needs_grad(bias)) tp.grad_ref(bias) += g.colwise().sum();
                  if (tp.needs_grad(x)) {
                    Matrix gx = g.array().rowwise() * tp.value(gain).row(0).array();
                    Eigen::VectorXd m1 = gx.rowwise().mean();
                    Eigen::VectorXd m2 = (gx.array() * xhat.array()).rowwise().sum() / d;
                    Matrix dx = gx.colwise() - m1;
                    dx -= (xhat.array().colwise() * m2.array()).matrix();
                    tp.grad_ref(x) += (dx.array().colwise() * inv_std.array()).matrix();
                  }
                });
}

Var mean_abs_error(Tape& t, Var pred, const Matrix& target) {
  const Matrix& p = t.value(pred);
  if (p.rows() != target.rows() || p.cols() != target.cols()) throw Error("mean_abs_error: shape mismatch");
  const double n = static_cast<double>(p.size());
  Matrix out(1, 1);
  out(0, 0) = (p - target).cwiseAbs().sum() / n;
  Matrix sign = (p - target).unaryExpr([](double v) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); });
  return t.push(std::move(out), t.needs_grad(pred), [pred, sign = std::move(sign), n](Tape& tp, int self) {
    const double g = tp.grad(Var{self})(0, 0);
    tp.grad_ref(pred) += sign * (g / n);
  });
}

std::vector<std::size_t> spatial_weight_offsets(const std::vector<std::vector<std::size_t>>& in_neighbors) {
  std::vector<std::size_t> off(in_neighbors.size() + 1, 0);
  for (std::size_t i = 0; i < in_neighbors.size(); ++i) off[i + 1] = off[i] + in_neighbors[i].size() + 1;
  return off;
}

Var spatial_attention(Tape& t, const SpatialAttentionArgs& a) {
  const Matrix& Q = t.value(a.q);
  const Matrix& K = t.value(a.k);
  const Matrix& V = t.value(a.v);
  const Matrix& KS = t.value(a.ks);
  const Matrix& VS = t.value(a.vs);
  const auto& L = a.layout;
  const auto& nbrs = *a.in_neighbors;
  const int H = a.heads;
  const Eigen::Index D = Q.cols();
  if (D % H != 0) throw Error("spatial_attention: width not divisible by heads");
  const Eigen::Index dh = D / H;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  if (Q.rows() != L.rows() || K.rows() != L.rows() || static_cast<int>(nbrs.size()) != L.roads)
    throw Error("spatial_attention: layout mismatch");

  const auto off = spatial_weight_offsets(nbrs);
  const std::size_t block = off.back();
  auto alpha = std::make_shared<std::vector<double>>(static_cast<std::size_t>(L.windows) * L.steps * H * block, 0.0);
  auto pos = [&](int g, int s, int h, int i) {
    return ((static_cast<std::size_t>(g) * L.steps + s) * H + h) * block + off[static_cast<std::size_t>(i)];
  };

  Matrix out = Matrix::Zero(Q.rows(), D);
  std::vector<double> logits;
  for (int g = 0; g < L.windows; ++g) {
    for (int s = 0; s < L.steps; ++s) {
      for (int i = 0; i < L.roads; ++i) {
        const Eigen::Index r = L.row(g, i, s);
        const auto& nb = nbrs[static_cast<std::size_t>(i)];
        const SpatialRowOverride* ov = nullptr;
        if (a.overrides) {
          auto it = a.overrides->find(r);
          if (it != a.overrides->end()) ov = &it->second;
        }
        for (int h = 0; h < H; ++h) {
          const Eigen::Index c0 = h * dh;
          double* w = alpha->data() + pos(g, s, h, i);
          if (ov) {
            // Stored weights describe the graph neighborhood only; refs
            // outside it are applied directly.
            for (auto [j, wj] : ov->refs[static_cast<std::size_t>(h)])
              out.row(r).segment(c0, dh) += wj * V.row(L.row(g, j, s)).segment(c0, dh);
            const double ws = ov->sentinel[static_cast<std::size_t>(h)];
            out.row(r).segment(c0, dh) += ws * VS.row(r).segment(c0, dh);
            for (std::size_t k = 0; k < nb.size(); ++k) {
              w[k] = 0.0;
              for (auto [j, wj] : ov->refs[static_cast<std::size_t>(h)])
                if (static_cast<std::size_t>(j) == nb[k]) w[k] += wj;
            }
            w[nb.size()] = ws;
            continue;
          }
          logits.resize(nb.size() + 1);
          const auto qrow = Q.row(r).segment(c0, dh);
          double mx = -std::numeric_limits<double>::infinity();
          for (std::size_t k = 0; k < nb.size(); ++k) {
            logits[k] = scale * qrow.dot(K.row(L.row(g, static_cast<int>(nb[k]), s)).segment(c0, dh));
            mx = std::max(mx, logits[k]);
          }
          logits[nb.size()] = scale * qrow.dot(KS.row(r).segment(c0, dh));
          mx = std::max(mx, logits[nb.size()]);
          double z = 0.0;
          for (auto& l : logits) z += (l = std::exp(l - mx));
          for (std::size_t k = 0; k <= nb.size(); ++k) w[k] = logits[k] / z;
          for (std::size_t k = 0; k < nb.size(); ++k)
            out.row(r).segment(c0, dh) += w[k] * V.row(L.row(g, static_cast<int>(nb[k]), s)).segment(c0, dh);
          out.row(r).segment(c0, dh) += w[nb.size()] * VS.row(r).segment(c0, dh);
        }
      }
    }
  }
  if (a.weights) *a.weights = *alpha;

  const bool need = any_grad(t, {a.q, a.k, a.v, a.ks, a.vs});
  const std::map<Eigen::Index, SpatialRowOverride>* overrides = a.overrides;
  return t.push(std::move(out), need,
                [args = a, alpha, off, overrides, H, dh, scale](Tape& tp, int self) {
                  const Matrix& G = tp.grad(Var{self});
                  const Matrix& Q = tp.value(args.q);
                  const Matrix& K = tp.value(args.k);
                  const Matrix& V = tp.value(args.v);
                  const Matrix& KS = tp.value(args.ks);
                  const Matrix& VS = tp.value(args.vs);
                  const auto& L = args.layout;
                  const auto& nbrs = *args.in_neighbors;
                  Matrix dQ = Matrix::Zero(Q.rows(), Q.cols()), dK = Matrix::Zero(K.rows(), K.cols());
                  Matrix dV = Matrix::Zero(V.rows(), V.cols()), dKS = Matrix::Zero(KS.rows(), KS.cols());
                  Matrix dVS = Matrix::Zero(VS.rows(), VS.cols());
                  const std::size_t block = off.back();
                  std::vector<double> dw;
                  for (int g = 0; g < L.windows; ++g)
                    for (int s = 0; s < L.steps; ++s)
                      for (int i = 0; i < L.roads; ++i) {
                        const Eigen::Index r = L.row(g, i, s);
                        const auto& nb = nbrs[static_cast<std::size_t>(i)];
                        const SpatialRowOverride* ov = nullptr;
                        if (overrides) {
                          auto it = overrides->find(r);
                          if (it != overrides->end()) ov = &it->second;
                        }
                        for (int h = 0; h < H; ++h) {
                          const Eigen::Index c0 = h * dh;
                          const auto grow = G.row(r).segment(c0, dh);
                          if (ov) {
                            for (auto [j, wj] : ov->refs[static_cast<std::size_t>(h)])
                              dV.row(L.row(g, j, s)).segment(c0, dh) += wj * grow;
                            dVS.row(r).segment(c0, dh) += ov->sentinel[static_cast<std::size_t>(h)] * grow;
                            continue;
                          }
                          const double* w = alpha->data() +
                                            ((static_cast<std::size_t>(g) * L.steps + s) * H + h) * block +
                                            off[static_cast<std::size_t>(i)];
                          dw.resize(nb.size() + 1);
                          double wdw = 0.0;
                          for (std::size_t k = 0; k < nb.size(); ++k) {
                            const Eigen::Index c = L.row(g, static_cast<int>(nb[k]), s);
                            dw[k] = grow.dot(V.row(c).segment(c0, dh));
                            dV.row(c).segment(c0, dh) += w[k] * grow;
                            wdw += w[k] * dw[k];
                          }
                          dw[nb.size()] = grow.dot(VS.row(r).segment(c0, dh));
                          dVS.row(r).segment(c0, dh) += w[nb.size()] * grow;
                          wdw += w[nb.size()] * dw[nb.size()];
                          const auto qrow = Q.row(r).segment(c0, dh);
                          for (std::size_t k = 0; k < nb.size(); ++k) {
                            const double dl = w[k] * (dw[k] - wdw) * scale;
                            const Eigen::Index c = L.row(g, static_cast<int>(nb[k]), s);
                            dQ.row(r).segment(c0, dh) += dl * K.row(c).segment(c0, dh);
                            dK.row(c).segment(c0, dh) += dl * qrow;
                          }
                          const double dls = w[nb.size()] * (dw[nb.size()] - wdw) * scale;
                          dQ.row(r).segment(c0, dh) += dls * KS.row(r).segment(c0, dh);
                          dKS.row(r).segment(c0, dh) += dls * qrow;
                        }
                      }
                  if (tp.needs_grad(args.q)) tp.grad_ref(args.q) += dQ;
                  if (tp.needs_grad(args.k)) tp.grad_ref(args.k) += dK;
                  if (tp.needs_grad(args.v)) tp.grad_ref(args.v) += dV;
                  if (tp.needs_grad(args.ks)) tp.grad_ref(args.ks) += dKS;
                  if (tp.needs_grad(args.vs)) tp.grad_ref(args.vs) += dVS;
                });
}

Var temporal_attention(Tape& t, const TemporalAttentionArgs& a) {
  const Matrix& Q = t.value(a.q);
  const Matrix& K = t.value(a.k);
  const Matrix& V = t.value(a.v);
  const auto& LQ = a.q_layout;
  const auto& LK = a.kv_layout;
  const int H = a.heads;
  const Eigen::Index D = Q.cols();
  if (D % H != 0) throw Error("temporal_attention: width not divisible by heads");
  if (LQ.windows != LK.windows || LQ.roads != LK.roads || Q.rows() != LQ.rows() || K.rows() != LK.rows())
    throw Error("temporal_attention: layout mismatch");
  const Eigen::Index dh = D / H;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const int Tq = LQ.steps, Tk = LK.steps;
  const Eigen::Index groups = static_cast<Eigen::Index>(LQ.windows) * LQ.roads;

  auto alpha = std::make_shared<std::vector<double>>(static_cast<std::size_t>(groups) * H * Tq * Tk, 0.0);
  Matrix out = Matrix::Zero(Q.rows(), D);
  Matrix scores(Tq, Tk);
  for (Eigen::Index grp = 0; grp < groups; ++grp) {
    const Eigen::Index q0 = grp * Tq, k0 = grp * Tk;
    const std::vector<Matrix>* ov = nullptr;
    if (a.overrides) {
      auto it = a.overrides->find(grp);
      if (it != a.overrides->end()) ov = &it->second;
    }
    for (int h = 0; h < H; ++h) {
      const Eigen::Index c0 = h * dh;
      double* w = alpha->data() + (static_cast<std::size_t>(grp) * H + h) * Tq * Tk;
      Eigen::Map<Matrix> W(w, Tq, Tk);
      if (ov) {
        W = (*ov)[static_cast<std::size_t>(h)].topRows(Tq);
      } else {
        scores.noalias() = scale * Q.block(q0, c0, Tq, dh).lazyProduct(K.block(k0, c0, Tk, dh).transpose());
        for (int i = 0; i < Tq; ++i) {
          const int visible = a.causal ? std::min(i + 1, Tk) : Tk;
          const double mx = scores.row(i).head(visible).maxCoeff();
          double z = 0.0;
          for (int j = 0; j < Tk; ++j) {
            const double e = j < visible ? std::exp(scores(i, j) - mx) : 0.0;
            W(i, j) = e;
            z += e;
          }
          W.row(i) /= z;
        }
      }
      out.block(q0, c0, Tq, dh).noalias() = W.lazyProduct(V.block(k0, c0, Tk, dh));
    }
  }
  if (a.weights) *a.weights = *alpha;

  const auto* overrides = a.overrides;
  return t.push(std::move(out), any_grad(t, {a.q, a.k, a.v}),
                [args = a, alpha, overrides, H, dh, scale, Tq, Tk, groups](Tape& tp, int self) {
                  const Matrix& G = tp.grad(Var{self});
                  const Matrix& Q = tp.value(args.q);
                  const Matrix& K = tp.value(args.k);
                  const Matrix& V = tp.value(args.v);
                  Matrix dQ = Matrix::Zero(Q.rows(), Q.cols()), dK = Matrix::Zero(K.rows(), K.cols());
                  Matrix dV = Matrix::Zero(V.rows(), V.cols());
                  Matrix dW(Tq, Tk), dS(Tq, Tk);
                  Eigen::VectorXd rowdot(Tq);
                  for (Eigen::Index grp = 0; grp < groups; ++grp) {
                    const Eigen::Index q0 = grp * Tq, k0 = grp * Tk;
                    const bool fixed = overrides && overrides->count(grp);
                    for (int h = 0; h < H; ++h) {
                      const Eigen::Index c0 = h * dh;
                      Eigen::Map<const Matrix> W(alpha->data() + (static_cast<std::size_t>(grp) * H + h) * Tq * Tk, Tq,
                                                 Tk);
                      const auto g = G.block(q0, c0, Tq, dh);
                      dV.block(k0, c0, Tk, dh).noalias() += W.transpose().lazyProduct(g);
                      if (fixed) continue;
                      dW.noalias() = g.lazyProduct(V.block(k0, c0, Tk, dh).transpose());
                      rowdot.noalias() = (dW.array() * W.array()).rowwise().sum().matrix();
                      dS = (W.array() * (dW.colwise() - rowdot).array()) * scale;
                      dQ.block(q0, c0, Tq, dh).noalias() += dS.lazyProduct(K.block(k0, c0, Tk, dh));
                      dK.block(k0, c0, Tk, dh).noalias() += dS.transpose().lazyProduct(Q.block(q0, c0, Tq, dh));
                    }
                  }
                  if (tp.needs_grad(args.q)) tp.grad_ref(args.q) += dQ;
                  if (tp.needs_grad(args.k)) tp.grad_ref(args.k) += dK;
                  if (tp.needs_grad(args.v)) tp.grad_ref(args.v) += dV;
                });
}

}  // namespace attnlab::ad

#pragma once

#include <Eigen/Dense>
#include <functional>
#include <utility>
#include <vector>

#include "longrep/common.hpp"

namespace longrep::ad {

using Mat = Eigen::MatrixXd;

// Reverse-mode tape over dense double matrices. Nodes are created in
// topological order, so the backward sweep is a plain reverse walk. Leaves can
// reference external parameter storage to avoid copies; gradients always live
// on the tape.
class Tape {
  public:
    int leaf_ref(const Mat* value, bool requires_grad = true) {
        Node n;
        n.ref = value;
        n.requires_grad = requires_grad;
        return push(std::move(n));
    }

    int leaf(Mat value, bool requires_grad = true) {
        Node n;
        n.owned = std::move(value);
        n.requires_grad = requires_grad;
        return push(std::move(n));
    }

    int constant(Mat value) { return leaf(std::move(value), false); }

    const Mat& value(int id) const {
        const Node& n = nodes_[id];
        return n.ref ? *n.ref : n.owned;
    }

    const Mat& grad(int id) const { return nodes_[id].grad; }

    size_t size() const { return nodes_.size(); }

    // --- ops ---------------------------------------------------------------

    int matmul(int a, int b) {
        int out = result(value(a) * value(b), a, b);
        set_backward(out, [this, a, b, out] {
            accum(a, nodes_[out].grad * value(b).transpose());
            accum(b, value(a).transpose() * nodes_[out].grad);
        });
        return out;
    }

    int add(int a, int b) {
        int out = result(value(a) + value(b), a, b);
        set_backward(out, [this, a, b, out] {
            accum(a, nodes_[out].grad);
            accum(b, nodes_[out].grad);
        });
        return out;
    }

    int sub(int a, int b) {
        int out = result(value(a) - value(b), a, b);
        set_backward(out, [this, a, b, out] {
            accum(a, nodes_[out].grad);
            accum(b, -nodes_[out].grad);
        });
        return out;
    }

    int scale(int a, double s) {
        int out = result(value(a) * s, a);
        set_backward(out, [this, a, s, out] { accum(a, nodes_[out].grad * s); });
        return out;
    }

    int cwise_mul(int a, int b) {
        int out = result(value(a).cwiseProduct(value(b)), a, b);
        set_backward(out, [this, a, b, out] {
            accum(a, nodes_[out].grad.cwiseProduct(value(b)));
            accum(b, nodes_[out].grad.cwiseProduct(value(a)));
        });
        return out;
    }

    // a (n x d) plus a (1 x d) row vector broadcast over rows.
    int add_row_broadcast(int a, int row) {
        Mat v = value(a);
        v.rowwise() += value(row).row(0);
        int out = result(std::move(v), a, row);
        set_backward(out, [this, a, row, out] {
            accum(a, nodes_[out].grad);
            accum(row, nodes_[out].grad.colwise().sum());
        });
        return out;
    }

    // Rows of `table` selected by ids; gradient scatter-adds.
    int gather_rows(int table, const std::vector<int>& ids) {
        const Mat& t = value(table);
        Mat v(static_cast<Eigen::Index>(ids.size()), t.cols());
        for (size_t i = 0; i < ids.size(); ++i) {
            if (ids[i] < 0 || ids[i] >= t.rows())
                throw ValidationError("gather_rows: id out of range");
            v.row(static_cast<Eigen::Index>(i)) = t.row(ids[i]);
        }
        int out = result(std::move(v), table);
        set_backward(out, [this, table, ids, out] {
            if (!nodes_[table].requires_grad) return;
            ensure_grad(table);
            for (size_t i = 0; i < ids.size(); ++i)
                nodes_[table].grad.row(ids[i]) +=
                    nodes_[out].grad.row(static_cast<Eigen::Index>(i));
        });
        return out;
    }

    int transpose(int a) {
        int out = result(value(a).transpose(), a);
        set_backward(out,
                     [this, a, out] { accum(a, nodes_[out].grad.transpose()); });
        return out;
    }

    int cols(int a, int start, int n) {
        int out = result(value(a).middleCols(start, n), a);
        set_backward(out, [this, a, start, n, out] {
            if (!nodes_[a].requires_grad) return;
            ensure_grad(a);
            nodes_[a].grad.middleCols(start, n) += nodes_[out].grad;
        });
        return out;
    }

    int hcat(const std::vector<int>& parts) {
        Eigen::Index rows = value(parts[0]).rows(), cols_total = 0;
        for (int p : parts) cols_total += value(p).cols();
        Mat v(rows, cols_total);
        Eigen::Index off = 0;
        for (int p : parts) {
            v.middleCols(off, value(p).cols()) = value(p);
            off += value(p).cols();
        }
        int out = result_list(std::move(v), parts);
        set_backward(out, [this, parts, out] {
            Eigen::Index off = 0;
            for (int p : parts) {
                Eigen::Index w = value(p).cols();
                accum(p, nodes_[out].grad.middleCols(off, w));
                off += w;
            }
        });
        return out;
    }

    int vcat(const std::vector<int>& parts) {
        Eigen::Index cols = value(parts[0]).cols(), rows_total = 0;
        for (int p : parts) rows_total += value(p).rows();
        Mat v(rows_total, cols);
        Eigen::Index off = 0;
        for (int p : parts) {
            v.middleRows(off, value(p).rows()) = value(p);
            off += value(p).rows();
        }
        int out = result_list(std::move(v), parts);
        set_backward(out, [this, parts, out] {
            Eigen::Index off = 0;
            for (int p : parts) {
                Eigen::Index h = value(p).rows();
                accum(p, nodes_[out].grad.middleRows(off, h));
                off += h;
            }
        });
        return out;
    }

    int gelu(int a) {
        constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
        constexpr double k = 0.044715;
        const Mat& x = value(a);
        Mat u = c * (x.array() + k * x.array().cube()).matrix();
        Mat t = u.array().tanh().matrix();
        Mat y = 0.5 * x.cwiseProduct((t.array() + 1.0).matrix());
        int out = result(std::move(y), a);
        set_backward(out, [this, a, t = std::move(t), out] {
            const Mat& x = value(a);
            Eigen::ArrayXXd dtanh = 1.0 - t.array().square();
            Eigen::ArrayXXd du = 0.7978845608028654 * (1.0 + 3 * 0.044715 * x.array().square());
            Eigen::ArrayXXd dydx = 0.5 * (1.0 + t.array()) + 0.5 * x.array() * dtanh * du;
            accum(a, (nodes_[out].grad.array() * dydx).matrix());
        });
        return out;
    }

    // Row-wise layer normalisation with affine gain/bias (1 x d each).
    int layer_norm(int x_id, int gamma, int beta, double eps = 1e-5) {
        const Mat& x = value(x_id);
        Eigen::Index n = x.rows(), d = x.cols();
        Mat xhat(n, d);
        Eigen::VectorXd inv_sigma(n);
        for (Eigen::Index r = 0; r < n; ++r) {
            double mu = x.row(r).mean();
            double var = (x.row(r).array() - mu).square().mean();
            inv_sigma(r) = 1.0 / std::sqrt(var + eps);
            xhat.row(r) = (x.row(r).array() - mu).matrix() * inv_sigma(r);
        }
        Mat y = xhat;
        y.array().rowwise() *= value(gamma).row(0).array();
        y.rowwise() += value(beta).row(0);
        int out = result_list(std::move(y), {x_id, gamma, beta});
        set_backward(out, [this, x_id, gamma, beta, xhat = std::move(xhat),
                           inv_sigma = std::move(inv_sigma), out] {
            const Mat& dy = nodes_[out].grad;
            Eigen::Index n = dy.rows(), d = dy.cols();
            if (nodes_[gamma].requires_grad)
                accum(gamma, (dy.array() * xhat.array()).colwise().sum().matrix());
            if (nodes_[beta].requires_grad) accum(beta, dy.colwise().sum());
            if (!nodes_[x_id].requires_grad) return;
            Mat g = dy;
            g.array().rowwise() *= value(gamma).row(0).array();
            Mat dx(n, d);
            for (Eigen::Index r = 0; r < n; ++r) {
                double mean_g = g.row(r).mean();
                double mean_gx = (g.row(r).array() * xhat.row(r).array()).mean();
                dx.row(r) = ((g.row(r).array() - mean_g - xhat.row(r).array() * mean_gx) *
                             inv_sigma(r))
                                .matrix();
            }
            accum(x_id, dx);
        });
        return out;
    }

    // Row-wise softmax of (x + additive_mask). Pass an empty mask for none.
    int softmax_rows(int x_id, const Mat& additive_mask = Mat()) {
        Mat z = value(x_id);
        if (additive_mask.size() > 0) z += additive_mask;
        Mat p(z.rows(), z.cols());
        for (Eigen::Index r = 0; r < z.rows(); ++r) {
            Eigen::ArrayXd row = z.row(r).array();
            double m = row.maxCoeff();
            Eigen::ArrayXd e = (row - m).exp();
            p.row(r) = (e / e.sum()).matrix();
        }
        int out = result(std::move(p), x_id);
        set_backward(out, [this, x_id, out] {
            // dx = p .* (dp - rowsum(dp .* p))
            const Mat& p = value(out);
            const Mat& dp = nodes_[out].grad;
            Eigen::VectorXd rowdot = dp.cwiseProduct(p).rowwise().sum();
            accum(x_id, (dp.array() * p.array() -
                         p.array().colwise() * rowdot.array())
                            .matrix());
        });
        return out;
    }

    // Inverted dropout with a mask fixed at forward time.
    int dropout(int a, double rate, Rng& rng) {
        if (rate <= 0.0) return a;
        const Mat& x = value(a);
        Mat mask(x.rows(), x.cols());
        double keep = 1.0 - rate;
        for (Eigen::Index r = 0; r < x.rows(); ++r)
            for (Eigen::Index c = 0; c < x.cols(); ++c)
                mask(r, c) = rng.bernoulli(keep) ? 1.0 / keep : 0.0;
        int m = constant(std::move(mask));
        return cwise_mul(a, m);
    }

    // Mean negative log-likelihood over the active rows of `logits`, labels
    // given per row. Returns a 1x1 node.
    int cross_entropy_mean(int logits, const std::vector<int>& labels,
                           const std::vector<char>& active) {
        const Mat& z = value(logits);
        int n_active = 0;
        double total = 0.0;
        Mat softmaxes(z.rows(), z.cols());
        for (Eigen::Index r = 0; r < z.rows(); ++r) {
            if (!active[static_cast<size_t>(r)]) continue;
            ++n_active;
            Eigen::ArrayXd row = z.row(r).array();
            double m = row.maxCoeff();
            Eigen::ArrayXd shifted = row - m;
            double lse = std::log(shifted.exp().sum());
            softmaxes.row(r) = (shifted - lse).exp().matrix();
            total -= shifted(labels[static_cast<size_t>(r)]) - lse;
        }
        if (n_active == 0) throw ValidationError("cross_entropy_mean: no active positions");
        Mat v(1, 1);
        v(0, 0) = total / n_active;
        int out = result(std::move(v), logits);
        set_backward(out, [this, logits, labels, active, n_active,
                           softmaxes = std::move(softmaxes), out] {
            if (!nodes_[logits].requires_grad) return;
            double upstream = nodes_[out].grad(0, 0);
            ensure_grad(logits);
            Mat& dl = nodes_[logits].grad;
            for (Eigen::Index r = 0; r < dl.rows(); ++r) {
                if (!active[static_cast<size_t>(r)]) continue;
                dl.row(r) += softmaxes.row(r) * (upstream / n_active);
                dl(r, labels[static_cast<size_t>(r)]) -= upstream / n_active;
            }
        });
        return out;
    }

    int sum(int a) {
        Mat v(1, 1);
        v(0, 0) = value(a).sum();
        int out = result(std::move(v), a);
        set_backward(out, [this, a, out] {
            accum(a, Mat::Constant(value(a).rows(), value(a).cols(),
                                   nodes_[out].grad(0, 0)));
        });
        return out;
    }

    void backward(int scalar_node) {
        const Mat& v = value(scalar_node);
        if (v.rows() != 1 || v.cols() != 1)
            throw ValidationError("backward: root must be a 1x1 node");
        for (Node& n : nodes_) n.grad.resize(0, 0);
        ensure_grad(scalar_node);
        nodes_[scalar_node].grad(0, 0) = 1.0;
        for (int i = scalar_node; i >= 0; --i)
            if (nodes_[i].backward && nodes_[i].grad.size() > 0) nodes_[i].backward();
    }

    // Gradient of a node after backward(); zero matrix if untouched.
    Mat grad_or_zero(int id) const {
        if (nodes_[id].grad.size() > 0) return nodes_[id].grad;
        return Mat::Zero(value(id).rows(), value(id).cols());
    }

  private:
    struct Node {
        Mat owned;
        const Mat* ref = nullptr;
        bool requires_grad = true;
        std::function<void()> backward;
        Mat grad;
    };

    int push(Node n) {
        nodes_.push_back(std::move(n));
        return static_cast<int>(nodes_.size()) - 1;
    }

    int result(Mat v, int dep_a, int dep_b = -1) {
        bool rg = (dep_a >= 0 && nodes_[dep_a].requires_grad) ||
                  (dep_b >= 0 && nodes_[dep_b].requires_grad);
        int id = leaf(std::move(v), rg);
        return id;
    }

    int result_list(Mat v, const std::vector<int>& deps) {
        bool rg = false;
        for (int d : deps) rg = rg || nodes_[d].requires_grad;
        return leaf(std::move(v), rg);
    }

    void set_backward(int id, std::function<void()> fn) {
        if (nodes_[id].requires_grad) nodes_[id].backward = std::move(fn);
    }

    void ensure_grad(int id) {
        if (nodes_[id].grad.size() == 0)
            nodes_[id].grad = Mat::Zero(value(id).rows(), value(id).cols());
    }

    template <typename Expr>
    void accum(int id, const Expr& g) {
        if (!nodes_[id].requires_grad) return;
        ensure_grad(id);
        nodes_[id].grad += g;
    }

    std::vector<Node> nodes_;
};

}  // namespace longrep::ad

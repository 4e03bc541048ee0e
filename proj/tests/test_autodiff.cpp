#include <catch2/catch_amalgamated.hpp>

#include "longrep/autodiff.hpp"

using namespace longrep;
using ad::Mat;
using ad::Tape;

namespace {

Mat random_mat(Rng& rng, int r, int c, double scale = 1.0) {
    Mat m(r, c);
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) m(i, j) = scale * rng.gaussian();
    return m;
}

// Central finite differences of a scalar function of several matrices. The
// builder must end with the root node (a 1x1) as the last node on the tape.
double max_rel_err(const std::vector<Mat*>& inputs,
                   const std::function<double(Tape&, std::vector<int>&)>& build) {
    auto eval = [&]() {
        Tape t;
        std::vector<int> ids;
        for (Mat* m : inputs) ids.push_back(t.leaf_ref(m));
        return build(t, ids);
    };

    Tape g;
    std::vector<int> gids;
    for (Mat* m : inputs) gids.push_back(g.leaf_ref(m));
    build(g, gids);
    g.backward(static_cast<int>(g.size()) - 1);

    double worst = 0.0;
    const double eps = 1e-6;
    for (size_t k = 0; k < inputs.size(); ++k) {
        Mat analytic = g.grad_or_zero(gids[k]);
        Mat& m = *inputs[k];
        for (int i = 0; i < m.rows(); ++i)
            for (int j = 0; j < m.cols(); ++j) {
                double orig = m(i, j);
                m(i, j) = orig + eps;
                double fp = eval();
                m(i, j) = orig - eps;
                double fm = eval();
                m(i, j) = orig;
                double numeric = (fp - fm) / (2 * eps);
                double denom = std::max({std::abs(analytic(i, j)), std::abs(numeric), 1e-4});
                worst = std::max(worst, std::abs(analytic(i, j) - numeric) / denom);
            }
    }
    return worst;
}

}  // namespace

TEST_CASE("matmul chain gradient matches finite differences") {
    Rng rng(1);
    Mat a = random_mat(rng, 3, 4), b = random_mat(rng, 4, 2);
    double err = max_rel_err({&a, &b}, [](Tape& t, std::vector<int>& in) {
        int y = t.matmul(in[0], in[1]);
        int s = t.sum(t.cwise_mul(y, y));
        return t.value(s)(0, 0);
    });
    CHECK(err < 1e-6);
}

TEST_CASE("layer_norm gradient matches finite differences") {
    Rng rng(2);
    Mat x = random_mat(rng, 4, 6), gamma = random_mat(rng, 1, 6), beta = random_mat(rng, 1, 6);
    double err = max_rel_err({&x, &gamma, &beta}, [](Tape& t, std::vector<int>& in) {
        int y = t.layer_norm(in[0], in[1], in[2]);
        int s = t.sum(t.gelu(y));
        return t.value(s)(0, 0);
    });
    CHECK(err < 1e-5);
}

TEST_CASE("softmax with causal mask gradient matches finite differences") {
    Rng rng(3);
    Mat x = random_mat(rng, 5, 5);
    Mat mask = Mat::Zero(5, 5);
    for (int i = 0; i < 5; ++i)
        for (int j = i + 1; j < 5; ++j) mask(i, j) = -1e30;
    double err = max_rel_err({&x}, [&](Tape& t, std::vector<int>& in) {
        int p = t.softmax_rows(in[0], mask);
        int s = t.sum(t.cwise_mul(p, p));
        return t.value(s)(0, 0);
    });
    CHECK(err < 1e-5);
}

TEST_CASE("gather + broadcast + cross entropy gradient matches finite differences") {
    Rng rng(4);
    Mat table = random_mat(rng, 7, 3), row = random_mat(rng, 1, 3), w = random_mat(rng, 3, 5);
    std::vector<int> ids = {2, 5, 2, 0};
    std::vector<int> labels = {1, 4, 0, 3};
    std::vector<char> active = {1, 0, 1, 1};
    double err = max_rel_err({&table, &row, &w}, [&](Tape& t, std::vector<int>& in) {
        int e = t.gather_rows(in[0], ids);
        int h = t.add_row_broadcast(e, in[1]);
        int logits = t.matmul(h, in[2]);
        int loss = t.cross_entropy_mean(logits, labels, active);
        return t.value(loss)(0, 0);
    });
    CHECK(err < 1e-5);
}

TEST_CASE("hcat/vcat/cols/transpose gradients match finite differences") {
    Rng rng(5);
    Mat a = random_mat(rng, 3, 4), b = random_mat(rng, 3, 2);
    double err = max_rel_err({&a, &b}, [](Tape& t, std::vector<int>& in) {
        int h = t.hcat({in[0], in[1]});            // 3x6
        int left = t.cols(h, 0, 3);                // 3x3
        int right = t.cols(h, 3, 3);               // 3x3
        int prod = t.matmul(left, t.transpose(right));
        int v = t.vcat({prod, prod});              // 6x3
        int s = t.sum(t.cwise_mul(v, v));
        return t.value(s)(0, 0);
    });
    CHECK(err < 1e-6);
}

TEST_CASE("gradient is zero for nodes off the computational path") {
    Rng rng(6);
    Mat a = random_mat(rng, 2, 2), unused = random_mat(rng, 2, 2);
    Tape t;
    int ia = t.leaf_ref(&a);
    int iu = t.leaf_ref(&unused);
    int s = t.sum(t.cwise_mul(ia, ia));
    t.backward(s);
    CHECK(t.grad_or_zero(iu).isZero());
    (void)iu;
}

TEST_CASE("frozen leaves receive no gradient") {
    Rng rng(7);
    Mat a = random_mat(rng, 2, 3), b = random_mat(rng, 3, 2);
    Tape t;
    int ia = t.leaf_ref(&a, /*requires_grad=*/false);
    int ib = t.leaf_ref(&b);
    int s = t.sum(t.matmul(ia, ib));
    t.backward(s);
    CHECK(t.grad_or_zero(ia).isZero());
    CHECK(!t.grad_or_zero(ib).isZero());
}

TEST_CASE("cross entropy of uniform logits is ln V") {
    Tape t;
    int logits = t.leaf(Mat::Zero(3, 11));
    std::vector<int> labels = {0, 5, 10};
    std::vector<char> active = {1, 1, 1};
    int loss = t.cross_entropy_mean(logits, labels, active);
    CHECK(t.value(loss)(0, 0) == Catch::Approx(std::log(11.0)).epsilon(1e-12));
}

TEST_CASE("cross entropy of near-one-hot logits tends to zero") {
    Tape t;
    Mat z = Mat::Zero(2, 4);
    z(0, 1) = 50.0;
    z(1, 3) = 50.0;
    int logits = t.leaf(std::move(z));
    int loss = t.cross_entropy_mean(logits, {1, 3}, {1, 1});
    CHECK(t.value(loss)(0, 0) < 1e-12);
}

TEST_CASE("dropout at rate zero is identity, deterministic given seed") {
    Rng rng(8);
    Mat x = random_mat(rng, 3, 3);
    Tape t;
    int ix = t.leaf_ref(&x);
    CHECK(t.dropout(ix, 0.0, rng) == ix);
    Rng r1(9), r2(9);
    Tape t1, t2;
    int d1 = t1.dropout(t1.leaf_ref(&x), 0.5, r1);
    int d2 = t2.dropout(t2.leaf_ref(&x), 0.5, r2);
    CHECK(t1.value(d1) == t2.value(d2));
}

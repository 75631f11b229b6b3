#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "mmdiff/autodiff.hpp"
#include "mmdiff/params.hpp"
#include "mmdiff/tensor.hpp"
#include "test_util.hpp"

using namespace mmdiff;

namespace {

// Generic gradcheck: builds a scalar loss from a parameter tensor, compares
// analytic gradients against central differences entry by entry.
void gradcheck(Tensor init, const std::function<ad::Var(ad::Tape&, ad::Var)>& build,
               double h = 1e-5, double tol = 1e-6) {
    Tensor param = init;
    Tensor grad = Tensor::zeros(param.shape);

    {
        ad::Tape tape(true);
        ad::Var p = tape.param(param, &grad);
        ad::Var loss = build(tape, p);
        tape.backward(loss);
    }

    auto eval = [&]() {
        ad::Tape tape(false);
        ad::Var p = tape.param(param, nullptr);
        ad::Var loss = build(tape, p);
        return tape.val(loss)[0];
    };

    for (int64_t i = 0; i < param.numel(); ++i) {
        double fd = mmtest::central_diff(eval, &param.v[static_cast<size_t>(i)], h);
        EXPECT_NEAR(grad[i], fd, tol + 1e-4 * std::fabs(fd)) << "entry " << i;
    }
}

TEST(Tensor, ShapeAndAccess) {
    Tensor t({2, 3});
    EXPECT_EQ(t.numel(), 6);
    t.at(1, 2) = 5.0;
    EXPECT_DOUBLE_EQ(t.v[5], 5.0);
    EXPECT_THROW(Tensor({2}, {1.0, 2.0, 3.0}), std::invalid_argument);
    Tensor r = t.reshaped({3, 2});
    EXPECT_EQ(r.shape[0], 3);
    EXPECT_THROW(t.reshaped({4, 2}), std::invalid_argument);
}

TEST(Rng, DeterministicStreams) {
    Rng a(42), b(42), c(43);
    for (int i = 0; i < 100; ++i) {
        double x = a.normal();
        EXPECT_DOUBLE_EQ(x, b.normal());
        EXPECT_TRUE(std::isfinite(x));
    }
    EXPECT_NE(a.next_u64(), c.next_u64());
    EXPECT_EQ(mix_seed(1, 2), mix_seed(1, 2));
    EXPECT_NE(mix_seed(1, 2), mix_seed(2, 1));
}

TEST(Rng, NormalMoments) {
    Rng rng(7);
    const int n = 200000;
    double s = 0.0, s2 = 0.0;
    for (int i = 0; i < n; ++i) {
        double x = rng.normal();
        s += x;
        s2 += x * x;
    }
    double mean = s / n;
    double var = s2 / n - mean * mean;
    EXPECT_NEAR(mean, 0.0, 3.0 / std::sqrt(static_cast<double>(n)));
    EXPECT_NEAR(var, 1.0, 3.0 * std::sqrt(2.0 / static_cast<double>(n)));
}

TEST(Autodiff, AddMulScaleGrad) {
    gradcheck(randn({4, 3}, 1), [](ad::Tape& t, ad::Var p) {
        ad::Var c = t.constant(randn({4, 3}, 2));
        ad::Var x = ad::mul(ad::add(p, c), p);
        return ad::mean_all(ad::scale(x, 1.7));
    });
}

TEST(Autodiff, SiluSigmoidAbsGrad) {
    gradcheck(randn({5, 2}, 3), [](ad::Tape& t, ad::Var p) {
        return ad::mean_all(ad::abs(ad::silu(ad::sigmoid(p))));
    });
}

TEST(Autodiff, MatmulGrad) {
    gradcheck(randn({3, 4}, 4), [](ad::Tape& t, ad::Var p) {
        ad::Var b = t.constant(randn({4, 5}, 5));
        return ad::mean_all(ad::matmul(p, b));
    });
    gradcheck(randn({4, 5}, 6), [](ad::Tape& t, ad::Var p) {
        ad::Var a = t.constant(randn({3, 4}, 7));
        return ad::mse(ad::matmul(a, p), t.constant(randn({3, 5}, 8)));
    });
}

TEST(Autodiff, MatmulNtGrad) {
    gradcheck(randn({3, 4}, 9), [](ad::Tape& t, ad::Var p) {
        ad::Var b = t.constant(randn({6, 4}, 10));
        return ad::mean_all(ad::matmul_nt(p, b));
    });
    gradcheck(randn({6, 4}, 11), [](ad::Tape& t, ad::Var p) {
        ad::Var a = t.constant(randn({3, 4}, 12));
        return ad::mean_all(ad::matmul_nt(a, p));
    });
}

TEST(Autodiff, SoftmaxGrad) {
    gradcheck(randn({4, 6}, 13), [](ad::Tape& t, ad::Var p) {
        ad::Var w = t.constant(randn({4, 6}, 14));
        return ad::mean_all(ad::mul(ad::softmax_rows(p), w));
    });
}

TEST(Autodiff, SoftmaxRowsSumToOne) {
    ad::Tape t(false);
    ad::Var x = t.constant(randn({7, 9}, 15));
    const Tensor& y = t.val(ad::softmax_rows(x));
    for (int64_t i = 0; i < 7; ++i) {
        double s = 0.0;
        for (int64_t j = 0; j < 9; ++j) s += y.at(i, j);
        EXPECT_NEAR(s, 1.0, 1e-12);
    }
}

TEST(Autodiff, LayerNormGrad) {
    gradcheck(randn({3, 5}, 16), [](ad::Tape& t, ad::Var p) {
        ad::Var g = t.constant(randn({5}, 17));
        ad::Var b = t.constant(randn({5}, 18));
        return ad::mse(ad::layer_norm(p, g, b), t.constant(randn({3, 5}, 19)));
    }, 1e-5, 1e-5);
    // gamma/beta path
    gradcheck(randn({5}, 20), [](ad::Tape& t, ad::Var p) {
        ad::Var x = t.constant(randn({3, 5}, 21));
        ad::Var b = t.constant(randn({5}, 22));
        return ad::mean_all(ad::abs(ad::layer_norm(x, p, b)));
    });
}

TEST(Autodiff, GroupNormGrad) {
    gradcheck(randn({4, 4, 6}, 23), [](ad::Tape& t, ad::Var p) {
        ad::Var g = t.constant(randn({6}, 24));
        ad::Var b = t.constant(randn({6}, 25));
        return ad::mse(ad::group_norm(p, g, b, 3), t.constant(randn({4, 4, 6}, 26)));
    }, 1e-5, 1e-5);
    gradcheck(randn({6}, 27), [](ad::Tape& t, ad::Var p) {
        ad::Var x = t.constant(randn({4, 4, 6}, 28));
        ad::Var b = t.constant(randn({6}, 29));
        return ad::mean_all(ad::abs(ad::group_norm(x, p, b, 2)));
    });
}

TEST(Autodiff, Conv2dGrad) {
    gradcheck(randn({5, 5, 2}, 30), [](ad::Tape& t, ad::Var p) {
        ad::Var w = t.constant(randn({3, 3, 2, 3}, 31));
        ad::Var b = t.constant(randn({3}, 32));
        return ad::mse(ad::conv2d(p, w, b, 1, 1), t.constant(randn({5, 5, 3}, 33)));
    });
    gradcheck(randn({3, 3, 2, 3}, 34), [](ad::Tape& t, ad::Var p) {
        ad::Var x = t.constant(randn({5, 5, 2}, 35));
        ad::Var b = t.constant(randn({3}, 36));
        return ad::mean_all(ad::conv2d(x, p, b, 2, 1));
    });
    gradcheck(randn({3}, 37), [](ad::Tape& t, ad::Var p) {
        ad::Var x = t.constant(randn({4, 4, 2}, 38));
        ad::Var w = t.constant(randn({1, 1, 2, 3}, 39));
        return ad::mean_all(ad::conv2d(x, w, p, 1, 0));
    });
}

TEST(Autodiff, UpsampleConcatGrad) {
    gradcheck(randn({3, 3, 2}, 40), [](ad::Tape& t, ad::Var p) {
        ad::Var up = ad::upsample_nearest2x(p);
        ad::Var other = t.constant(randn({6, 6, 1}, 41));
        return ad::mean_all(ad::abs(ad::concat_channels(up, other)));
    });
}

TEST(Autodiff, BilinearResizeGrad) {
    gradcheck(randn({4, 4}, 42), [](ad::Tape& t, ad::Var p) {
        return ad::mse(ad::bilinear_resize(p, 7, 5), t.constant(randn({7, 5}, 43)));
    });
    // exact on constant maps
    ad::Tape t(false);
    ad::Var c = t.constant(Tensor::full({3, 5}, 0.75));
    const Tensor& y = t.val(ad::bilinear_resize(c, 9, 4));
    for (double e : y.v) EXPECT_NEAR(e, 0.75, 1e-12);
}

TEST(Autodiff, SliceStackReduceGrad) {
    gradcheck(randn({4, 6}, 44), [](ad::Tape& t, ad::Var p) {
        ad::Var s = ad::slice_cols(p, 1, 4);
        ad::Var r = ad::slice_rows(p, 0, 2);
        return ad::add(ad::mean_all(s), ad::mean_all(r));
    });
    gradcheck(randn({4, 6}, 45), [](ad::Tape& t, ad::Var p) {
        ad::Var cm = ad::cols_mean(p, 2, 5);
        ad::Var rm = ad::rows_mean(p);
        return ad::add(ad::sum_all(cm), ad::sum_all(rm));
    });
    gradcheck(randn({3, 4}, 46), [](ad::Tape& t, ad::Var p) {
        std::vector<ad::Var> rows;
        rows.push_back(ad::rows_mean(p));
        rows.push_back(ad::cols_mean(p, 0, 4));
        return ad::mean_all(ad::abs(ad::stack_rows(rows)));
    });
}

TEST(Autodiff, MaxDivGrad) {
    Tensor init = randn({3, 3}, 47);
    init.v[4] = 10.0;  // unique max away from ties
    gradcheck(init, [](ad::Tape& t, ad::Var p) {
        ad::Var m = ad::max_all(p);
        return ad::mean_all(ad::div_scalar(p, m));
    });
}

TEST(Autodiff, GatherCrossEntropyGrad) {
    gradcheck(randn({5, 4}, 48), [](ad::Tape& t, ad::Var p) {
        std::vector<int32_t> idx = {0, 2, 4, 2};
        ad::Var rows = ad::gather_rows(p, idx);
        return ad::cross_entropy_logits(rows, {1, 0, 3, 2});
    });
}

TEST(Autodiff, L2NormalizeGrad) {
    gradcheck(randn({3, 4}, 49), [](ad::Tape& t, ad::Var p) {
        ad::Var w = t.constant(randn({3, 4}, 50));
        return ad::mean_all(ad::mul(ad::l2_normalize_rows(p), w));
    });
}

TEST(Autodiff, ParamReuseAccumulates) {
    // the same parameter appearing twice must receive both contributions
    Tensor p = randn({2, 2}, 51);
    Tensor g = Tensor::zeros({2, 2});
    ad::Tape tape(true);
    ad::Var a = tape.param(p, &g);
    ad::Var b = tape.param(p, &g);
    tape.backward(ad::sum_all(ad::add(a, b)));
    for (double e : g.v) EXPECT_DOUBLE_EQ(e, 2.0);
}

TEST(Autodiff, NonRecordingTapeMatchesRecording) {
    Tensor x = randn({4, 4, 3}, 52);
    Tensor w = randn({3, 3, 3, 2}, 53);
    Tensor b = randn({2}, 54);
    auto run = [&](bool rec) {
        ad::Tape t(rec);
        ad::Var out = ad::conv2d(t.param(x, nullptr), t.constant(w), t.constant(b), 1, 1);
        return t.val(ad::mean_all(ad::silu(out)))[0];
    };
    EXPECT_DOUBLE_EQ(run(true), run(false));
}

TEST(AdamW, ZeroLrLeavesWeightsUntouched) {
    ParamStore store;
    store.add("w", randn({4}, 55));
    Tensor before = store.value("w");
    AdamW opt;
    opt.lr = 0.0;
    opt.weight_decay = 0.0;
    opt.attach(store);
    store.grad("w") = Tensor::full({4}, 1.0);
    opt.step();
    for (int64_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(store.value("w")[i], before[i]);
}

TEST(AdamW, DescendsQuadratic) {
    ParamStore store;
    store.add("w", Tensor::full({3}, 4.0));
    AdamW opt;
    opt.lr = 0.1;
    opt.weight_decay = 0.0;
    opt.attach(store);
    for (int step = 0; step < 200; ++step) {
        store.zero_grads();
        ad::Tape tape(true);
        ad::Var w = store.use(tape, "w");
        tape.backward(ad::mse(w, tape.constant(Tensor::zeros({3}))));
        opt.step();
    }
    for (int64_t i = 0; i < 3; ++i) EXPECT_LT(std::fabs(store.value("w")[i]), 0.05);
}

TEST(ParamStore, ChecksumTracksValues) {
    ParamStore a;
    a.add("x", randn({3, 3}, 56));
    uint64_t h0 = a.checksum_all();
    EXPECT_EQ(h0, a.checksum_all());
    a.value("x")[0] += 1e-9;
    EXPECT_NE(h0, a.checksum_all());
}

}  // namespace

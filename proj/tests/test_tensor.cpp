#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstring>
#include <functional>

#include "ltuning/gradcheck.hpp"
#include "ltuning/optim.hpp"
#include "ltuning/rng.hpp"
#include "ltuning/tensor.hpp"

using namespace ltuning;

namespace {

TensorPtrT<double> random_tensor(shape_t shape, SplitMix64& rng, bool requires_grad = true) {
    auto t = make_tensor<double>(std::move(shape), requires_grad);
    for (auto& v : t->data) v = rng.next_normal();
    return t;
}

// Fixed random readout weights, drawn once per check so the loss stays
// deterministic across finite-difference evaluations. Reading out through
// random weights keeps degenerate gradients (softmax rows summing to one,
// layer-norm shift invariance) visible.
TensorPtrT<double> fixed_weights(shape_t shape, SplitMix64& rng) {
    auto w = make_tensor<double>(std::move(shape), false);
    for (auto& v : w->data) v = rng.next_normal();
    return w;
}

TensorPtrT<double> weighted_sum(TapeT<double>& tape, const TensorPtrT<double>& x,
                                const TensorPtrT<double>& w) {
    return sum_all(tape, mul(tape, x, w));
}

void require_gradients_match(const std::function<TensorPtrT<double>(TapeT<double>&)>& loss_fn,
                             const std::vector<NamedParam<double>>& params, double tol = 1e-4) {
    const auto report = finite_diff_check<double>(loss_fn, params, 1e-4);
    CAPTURE(report.max_rel_err);
    REQUIRE(report.max_rel_err < tol);
}

}  // namespace

TEST_CASE("matmul forward examples", "[tensor]") {
    Tape tape;
    auto a = tensor_from<float>({2, 2}, {1, 2, 3, 4});
    auto eye = tensor_from<float>({2, 2}, {1, 0, 0, 1});
    auto prod = matmul(tape, a, eye);
    REQUIRE(prod->data == std::vector<float>{1, 2, 3, 4});

    auto row = tensor_from<float>({1, 2}, {1, 2});
    auto col = tensor_from<float>({2, 1}, {3, 4});
    auto scalar = matmul(tape, row, col);
    REQUIRE(scalar->shape == shape_t{1, 1});
    REQUIRE(scalar->data[0] == 11.0f);
}

TEST_CASE("matmul shape mismatch names both shapes", "[tensor]") {
    Tape tape;
    auto a = make_tensor<float>({2, 3});
    auto b = make_tensor<float>({2, 3});
    REQUIRE_THROWS_MATCHES(matmul(tape, a, b), ShapeError,
                           Catch::Matchers::MessageMatches(
                               Catch::Matchers::ContainsSubstring("[2,3]")));
}

TEST_CASE("matmul gradient matches the finite-difference oracle", "[tensor]") {
    // d sum(a*b) / da at a=[[1,1]], b=[[2],[5]] is [[2,5]].
    auto a = tensor_from<double>({1, 2}, {1, 1}, true);
    auto b = tensor_from<double>({2, 1}, {2, 5});
    {
        TapeT<double> tape;
        auto loss = sum_all(tape, matmul(tape, a, b));
        tape.backward(loss);
        REQUIRE(a->grad[0] == Catch::Approx(2.0));
        REQUIRE(a->grad[1] == Catch::Approx(5.0));
    }
    // Independent central differences, step 1e-3.
    a->zero_grad();
    const double h = 1e-3;
    for (int i = 0; i < 2; ++i) {
        auto eval = [&] {
            TapeT<double> tape;
            return sum_all(tape, matmul(tape, a, b))->data[0];
        };
        const double saved = a->data[i];
        a->data[i] = saved + h;
        const double fp = eval();
        a->data[i] = saved - h;
        const double fm = eval();
        a->data[i] = saved;
        const double fd = (fp - fm) / (2 * h);
        REQUIRE(fd == Catch::Approx(i == 0 ? 2.0 : 5.0).epsilon(1e-6));
    }
}

TEST_CASE("softmax examples", "[tensor]") {
    Tape tape;
    auto sym = softmax_lastdim(tape, tensor_from<float>({3}, {0, 0, 0}));
    for (float v : sym->data) REQUIRE(v == Catch::Approx(1.0f / 3.0f));

    auto extreme = softmax_lastdim(tape, tensor_from<float>({2}, {1000, 0}));
    REQUIRE(std::isfinite(extreme->data[0]));
    REQUIRE(extreme->data[0] == Catch::Approx(1.0f));
    REQUIRE(extreme->data[1] == Catch::Approx(0.0f).margin(1e-6));

    auto closed = softmax_lastdim(
        tape, tensor_from<float>({2}, {static_cast<float>(std::log(2.0)), 0.0f}));
    REQUIRE(closed->data[0] == Catch::Approx(2.0f / 3.0f));
    REQUIRE(closed->data[1] == Catch::Approx(1.0f / 3.0f));
}

TEST_CASE("softmax rows sum to one and are non-negative", "[tensor][property]") {
    SplitMix64 rng(41);
    for (int trial = 0; trial < 20; ++trial) {
        const std::int64_t rows = 1 + static_cast<std::int64_t>(rng.next_below(4));
        const std::int64_t cols = 1 + static_cast<std::int64_t>(rng.next_below(7));
        auto x = make_tensor<float>({rows, cols});
        for (auto& v : x->data) v = static_cast<float>(rng.next_normal() * 10);
        Tape tape;
        auto p = softmax_lastdim(tape, x);
        for (std::int64_t r = 0; r < rows; ++r) {
            float sum = 0;
            for (std::int64_t c = 0; c < cols; ++c) {
                const float v = p->data[static_cast<std::size_t>(r * cols + c)];
                REQUIRE(v >= 0.0f);
                sum += v;
            }
            REQUIRE(sum == Catch::Approx(1.0f).margin(1e-6));
        }
    }
}

TEST_CASE("layer_norm examples", "[tensor]") {
    Tape tape;
    auto gain = tensor_from<float>({3}, {1, 1, 1});
    auto bias = tensor_from<float>({3}, {0, 0, 0});
    auto constant = layer_norm(tape, tensor_from<float>({1, 3}, {1, 1, 1}), gain, bias);
    for (float v : constant->data) REQUIRE(v == Catch::Approx(0.0f).margin(1e-6));

    auto gain2 = tensor_from<float>({2}, {1, 1});
    auto bias2 = tensor_from<float>({2}, {0, 0});
    auto two = layer_norm(tape, tensor_from<float>({1, 2}, {-1, 1}), gain2, bias2);
    const float expected = static_cast<float>(1.0 / std::sqrt(1.0 + 1e-5));
    REQUIRE(two->data[0] == Catch::Approx(-expected));
    REQUIRE(two->data[1] == Catch::Approx(expected));

    auto gain0 = tensor_from<float>({2}, {0, 0});
    auto bias5 = tensor_from<float>({2}, {5, 5});
    auto affine = layer_norm(tape, tensor_from<float>({1, 2}, {0, 2}), gain0, bias5);
    REQUIRE(affine->data[0] == Catch::Approx(5.0f));
    REQUIRE(affine->data[1] == Catch::Approx(5.0f));
}

TEST_CASE("concat_rows contract", "[tensor]") {
    Tape tape;
    auto a = tensor_from<float>({2, 3}, {1, 2, 3, 4, 5, 6});
    auto b = tensor_from<float>({1, 3}, {7, 8, 9});
    auto both = concat_rows(tape, a, b);
    REQUIRE(both->shape == shape_t{3, 3});
    REQUIRE(both->data == std::vector<float>{1, 2, 3, 4, 5, 6, 7, 8, 9});

    auto empty = make_tensor<float>({0, 3});
    auto same = concat_rows(tape, empty, b);
    REQUIRE(same->shape == shape_t{1, 3});
    REQUIRE(same->data == b->data);

    REQUIRE_THROWS_AS(concat_rows(tape, a, make_tensor<float>({1, 4})), ShapeError);
}

TEST_CASE("concat_rows gradient of sum is all ones", "[tensor]") {
    auto a = make_tensor<double>({2, 2}, true);
    auto b = make_tensor<double>({3, 2}, true);
    TapeT<double> tape;
    auto loss = sum_all(tape, concat_rows(tape, a, b));
    tape.backward(loss);
    for (double g : a->grad) REQUIRE(g == 1.0);
    for (double g : b->grad) REQUIRE(g == 1.0);
}

TEST_CASE("embedding_gather contract", "[tensor]") {
    Tape tape;
    auto table = tensor_from<float>({3, 2}, {0, 1, 10, 11, 20, 21});
    auto twice = embedding_gather(tape, table, {0, 0});
    REQUIRE(twice->data == std::vector<float>{0, 1, 0, 1});

    auto none = embedding_gather(tape, table, {});
    REQUIRE(none->shape == shape_t{0, 2});

    REQUIRE_THROWS_MATCHES(embedding_gather(tape, table, {3}), VocabError,
                           Catch::Matchers::MessageMatches(
                               Catch::Matchers::ContainsSubstring("3")));
}

TEST_CASE("embedding_gather gradient scatter-adds", "[tensor]") {
    auto table = make_tensor<double>({4, 3}, true);
    TapeT<double> tape;
    auto loss = sum_all(tape, embedding_gather(tape, table, {2, 2}));
    tape.backward(loss);
    for (std::int64_t r = 0; r < 4; ++r) {
        for (std::int64_t c = 0; c < 3; ++c) {
            const double expect = (r == 2) ? 2.0 : 0.0;
            REQUIRE(table->grad[static_cast<std::size_t>(r * 3 + c)] == expect);
        }
    }
}

TEST_CASE("bce_with_logits examples", "[tensor]") {
    Tape tape;
    auto zeros = make_tensor<float>({3, 2});
    auto loss = bce_with_logits(tape, zeros, {0, 1, 0});
    REQUIRE(loss->data[0] == Catch::Approx(std::log(2.0)).epsilon(1e-6));

    auto confident = tensor_from<float>({1, 2}, {20, -20});
    REQUIRE(bce_with_logits(tape, confident, {0})->data[0] < 1e-8f);

    auto closed = tensor_from<float>({1, 2}, {0, static_cast<float>(std::log(3.0))});
    REQUIRE(bce_with_logits(tape, closed, {1})->data[0] ==
            Catch::Approx(0.287682).epsilon(1e-4));

    REQUIRE_THROWS_AS(bce_with_logits(tape, zeros, {0, 1}), ShapeError);
    REQUIRE_THROWS_AS(bce_with_logits(tape, zeros, {0, 1, 2}), ShapeError);
}

TEST_CASE("adam step examples", "[optim]") {
    SECTION("first step with unit gradient moves by about -lr") {
        auto p = tensor_from<float>({1}, {1.0f}, true);
        AdamHyperparams<float> hp;
        hp.lr = 0.1f;
        AdamT<float> adam({{"p", p}}, hp);
        p->grad[0] = 1.0f;
        adam.step();
        REQUIRE(adam.step_count() == 1);
        REQUIRE(p->data[0] == Catch::Approx(0.9f).epsilon(1e-6));
        REQUIRE(p->grad[0] == 0.0f);  // zeroed after the step
    }
    SECTION("zero gradient leaves parameters unchanged") {
        auto p = tensor_from<float>({2}, {1.0f, -2.0f}, true);
        AdamT<float> adam({{"p", p}});
        adam.step();
        REQUIRE(p->data == std::vector<float>{1.0f, -2.0f});
    }
    SECTION("repeated unit gradients decrease the parameter monotonically") {
        auto p = tensor_from<float>({1}, {1.0f}, true);
        AdamHyperparams<float> hp;
        hp.lr = 0.1f;
        AdamT<float> adam({{"p", p}}, hp);
        float prev = p->data[0];
        for (int i = 0; i < 2; ++i) {
            p->grad[0] = 1.0f;
            adam.step();
            REQUIRE(p->data[0] < prev);
            prev = p->data[0];
        }
    }
    SECTION("missing gradient names the parameter") {
        auto p = make_tensor<float>({1}, false);
        AdamT<float> adam({{"w_oops", p}});
        REQUIRE_THROWS_MATCHES(adam.step(), TrainError,
                               Catch::Matchers::MessageMatches(
                                   Catch::Matchers::ContainsSubstring("w_oops")));
    }
}

TEST_CASE("finite_diff_check examples", "[gradcheck]") {
    SECTION("quadratic") {
        auto x = tensor_from<double>({1}, {3.0}, true);
        auto report = finite_diff_check<double>(
            [&](TapeT<double>& tape) { return sum_all(tape, mul(tape, x, x)); }, {{"x", x}}, 1e-4);
        REQUIRE(report.max_rel_err < 1e-6);
    }
    SECTION("one-row bce") {
        auto logits = tensor_from<double>({1, 2}, {0.3, -0.2}, true);
        auto report = finite_diff_check<double>(
            [&](TapeT<double>& tape) { return bce_with_logits(tape, logits, {1}); },
            {{"logits", logits}}, 1e-4);
        REQUIRE(report.max_rel_err < 1e-4);
    }
    SECTION("constant function has vanishing gradients on both sides") {
        auto x = tensor_from<double>({2}, {1.0, 2.0}, true);
        auto c = make_tensor<double>({1});
        c->data[0] = 5.0;
        auto report = finite_diff_check<double>(
            [&](TapeT<double>& tape) {
                return add(tape, sum_all(tape, scale(tape, x, 0.0)), c);
            },
            {{"x", x}}, 1e-4);
        REQUIRE(report.max_rel_err < 1e-8);
    }
}

TEST_CASE("every op gradient matches central finite differences", "[tensor][property]") {
    SplitMix64 rng(2024);

    SECTION("matmul 2D") {
        for (int trial = 0; trial < 3; ++trial) {
            const std::int64_t p = 1 + static_cast<std::int64_t>(rng.next_below(3));
            const std::int64_t q = 1 + static_cast<std::int64_t>(rng.next_below(3));
            const std::int64_t r = 1 + static_cast<std::int64_t>(rng.next_below(3));
            auto a = random_tensor({p, q}, rng);
            auto b = random_tensor({q, r}, rng);
            auto w = fixed_weights({p, r}, rng);
            require_gradients_match(
                [&](TapeT<double>& tape) {
                    return weighted_sum(tape, matmul(tape, a, b), w);
                },
                {{"a", a}, {"b", b}});
        }
    }
    SECTION("matmul 3Dx3D and 3Dx2D") {
        auto a = random_tensor({2, 3, 4}, rng);
        auto b3 = random_tensor({2, 4, 2}, rng);
        auto w3 = fixed_weights({2, 3, 2}, rng);
        require_gradients_match(
            [&](TapeT<double>& tape) { return weighted_sum(tape, matmul(tape, a, b3), w3); },
            {{"a", a}, {"b", b3}});
        auto b2 = random_tensor({4, 3}, rng);
        auto w2 = fixed_weights({2, 3, 3}, rng);
        require_gradients_match(
            [&](TapeT<double>& tape) { return weighted_sum(tape, matmul(tape, a, b2), w2); },
            {{"a", a}, {"b", b2}});
    }
    SECTION("add mul scale gelu") {
        auto a = random_tensor({3, 4}, rng);
        auto b = random_tensor({3, 4}, rng);
        auto w = fixed_weights({3, 4}, rng);
        require_gradients_match(
            [&](TapeT<double>& tape) {
                auto y = gelu(tape, scale(tape, add(tape, a, mul(tape, a, b)), 0.7));
                return weighted_sum(tape, y, w);
            },
            {{"a", a}, {"b", b}});
    }
    SECTION("softmax") {
        auto x = random_tensor({3, 5}, rng);
        auto w = fixed_weights({3, 5}, rng);
        require_gradients_match(
            [&](TapeT<double>& tape) {
                return weighted_sum(tape, softmax_lastdim(tape, x), w);
            },
            {{"x", x}});
    }
    SECTION("layer_norm") {
        auto x = random_tensor({3, 6}, rng);
        auto gain = random_tensor({6}, rng);
        auto bias = random_tensor({6}, rng);
        auto w = fixed_weights({3, 6}, rng);
        require_gradients_match(
            [&](TapeT<double>& tape) {
                return weighted_sum(tape, layer_norm(tape, x, gain, bias), w);
            },
            {{"x", x}, {"gain", gain}, {"bias", bias}}, 2e-4);
    }
    SECTION("concat and slicing") {
        auto a = random_tensor({2, 3}, rng);
        auto b = random_tensor({3, 3}, rng);
        auto w = fixed_weights({3, 3}, rng);
        require_gradients_match(
            [&](TapeT<double>& tape) {
                auto joined = concat_rows(tape, a, b);
                auto cut = slice_rows(tape, joined, 1, 4);
                return weighted_sum(tape, cut, w);
            },
            {{"a", a}, {"b", b}});
        auto c = random_tensor({2, 2, 3}, rng);
        auto d = random_tensor({2, 1, 3}, rng);
        auto w2 = fixed_weights({2, 3, 3}, rng);
        require_gradients_match(
            [&](TapeT<double>& tape) {
                return weighted_sum(tape, concat_dim1(tape, c, d), w2);
            },
            {{"c", c}, {"d", d}});
    }
    SECTION("reshape and permutes") {
        auto x = random_tensor({2, 3, 4}, rng);
        auto w = fixed_weights({4, 6}, rng);
        require_gradients_match(
            [&](TapeT<double>& tape) {
                auto y = permute021(tape, permute102(tape, x));
                return weighted_sum(tape, reshape(tape, y, {4, 6}), w);
            },
            {{"x", x}});
    }
    SECTION("embedding_gather") {
        auto table = random_tensor({5, 3}, rng);
        auto w = fixed_weights({3, 3}, rng);
        require_gradients_match(
            [&](TapeT<double>& tape) {
                return weighted_sum(tape, embedding_gather(tape, table, {1, 4, 1}), w);
            },
            {{"table", table}});
    }
    SECTION("stack_rows and take_row") {
        auto a = random_tensor({2, 3}, rng);
        auto b = random_tensor({3}, rng);
        auto w = fixed_weights({1, 3}, rng);
        require_gradients_match(
            [&](TapeT<double>& tape) {
                auto stacked = stack_rows(tape, {a, b});
                return weighted_sum(tape, take_row(tape, stacked, 2), w);
            },
            {{"a", a}, {"b", b}});
    }
    SECTION("losses") {
        auto logits2 = random_tensor({4, 2}, rng);
        require_gradients_match(
            [&](TapeT<double>& tape) { return bce_with_logits(tape, logits2, {0, 1, 1, 0}); },
            {{"logits", logits2}});
        auto logitsk = random_tensor({3, 5}, rng);
        require_gradients_match(
            [&](TapeT<double>& tape) {
                return cross_entropy_with_logits(tape, logitsk, {4, 0, 2});
            },
            {{"logits", logitsk}});
    }
}

TEST_CASE("tape replays accumulate gradients additively", "[tensor]") {
    auto x = tensor_from<double>({2}, {1.5, -0.5}, true);
    TapeT<double> tape;
    auto w = tensor_from<double>({2}, {2.0, 3.0});
    auto loss = sum_all(tape, mul(tape, x, w));
    tape.backward(loss);
    const auto once = x->grad;
    tape.backward(loss);
    for (std::size_t i = 0; i < once.size(); ++i) {
        REQUIRE(x->grad[i] == 2.0 * once[i]);
    }
}

TEST_CASE("backward requires a scalar root", "[tensor]") {
    auto x = make_tensor<double>({2, 2}, true);
    TapeT<double> tape;
    auto y = scale(tape, x, 2.0);
    REQUIRE_THROWS_AS(tape.backward(y), ShapeError);
}

TEST_CASE("operations are bit-deterministic", "[tensor]") {
    auto run = [] {
        SplitMix64 rng(99);
        auto x = make_tensor<float>({4, 8});
        for (auto& v : x->data) v = static_cast<float>(rng.next_normal());
        auto gain = tensor_from<float>({8}, std::vector<float>(8, 1.0f));
        auto bias = tensor_from<float>({8}, std::vector<float>(8, 0.0f));
        Tape tape;
        auto y = softmax_lastdim(tape, layer_norm(tape, gelu(tape, x), gain, bias));
        return y->data;
    };
    const auto first = run();
    const auto second = run();
    REQUIRE(std::memcmp(first.data(), second.data(), first.size() * sizeof(float)) == 0);
}

TEST_CASE("sgd step applies gradients and zeroes them", "[optim]") {
    auto p = tensor_from<float>({2}, {1.0f, 1.0f}, true);
    p->grad = {0.5f, -0.5f};
    sgd_step<float>({{"p", p}}, 0.1f);
    REQUIRE(p->data[0] == Catch::Approx(0.95f));
    REQUIRE(p->data[1] == Catch::Approx(1.05f));
    REQUIRE(p->grad == std::vector<float>{0.0f, 0.0f});
}

#include "fd_check.hpp"

namespace fdcheck {

namespace ad = musicssl::ad;

namespace {

std::size_t pick(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

std::vector<std::uint32_t> rand_ids(std::size_t n, std::size_t k, std::mt19937_64& rng) {
  std::vector<std::uint32_t> ids(n);
  for (auto& i : ids) i = static_cast<std::uint32_t>(pick(rng, 0, k - 1));
  return ids;
}

std::vector<bool> rand_mask(std::size_t n, std::mt19937_64& rng) {
  std::vector<bool> m(n);
  for (std::size_t i = 0; i < n; ++i) m[i] = pick(rng, 0, 1) == 1;
  m[pick(rng, 0, n - 1)] = true;
  return m;
}

using Make = std::pair<std::vector<Input>, Build>;

}  // namespace

std::vector<OpCase> all_op_cases() {
  std::vector<OpCase> cases;
  auto add_case = [&](std::string name, std::function<Make(std::mt19937_64&)> make) {
    cases.push_back({std::move(name), std::move(make)});
  };

  add_case("matmul", [](auto& rng) -> Make {
    const auto b = pick(rng, 1, 3), m = pick(rng, 1, 5), k = pick(rng, 1, 5), n = pick(rng, 1, 5);
    return {{{{b, m, k}, randn(b * m * k, rng)}, {{k, n}, randn(k * n, rng)}},
            [](auto&, const auto& v) { return ad::matmul(v[0], v[1]); }};
  });
  add_case("bmm", [](auto& rng) -> Make {
    const auto b = pick(rng, 1, 3), m = pick(rng, 1, 4), k = pick(rng, 1, 4), n = pick(rng, 1, 4);
    return {{{{b, m, k}, randn(b * m * k, rng)}, {{b, k, n}, randn(b * k * n, rng)}},
            [](auto&, const auto& v) { return ad::bmm(v[0], v[1]); }};
  });
  add_case("bmm_trans_b", [](auto& rng) -> Make {
    const auto b = pick(rng, 1, 3), m = pick(rng, 1, 4), k = pick(rng, 1, 4), n = pick(rng, 1, 4);
    return {{{{b, m, k}, randn(b * m * k, rng)}, {{b, n, k}, randn(b * k * n, rng)}},
            [](auto&, const auto& v) { return ad::bmm(v[0], v[1], true); }};
  });
  add_case("add_broadcast", [](auto& rng) -> Make {
    const auto m = pick(rng, 1, 4), n = pick(rng, 1, 4);
    return {{{{m, n}, randn(m * n, rng)}, {{n}, randn(n, rng)}},
            [](auto&, const auto& v) { return ad::add(v[0], v[1]); }};
  });
  add_case("sub", [](auto& rng) -> Make {
    const auto m = pick(rng, 1, 4), n = pick(rng, 1, 4);
    return {{{{m, n}, randn(m * n, rng)}, {{m, n}, randn(m * n, rng)}},
            [](auto&, const auto& v) { return ad::sub(v[0], v[1]); }};
  });
  add_case("mul_broadcast", [](auto& rng) -> Make {
    const auto m = pick(rng, 1, 4), n = pick(rng, 1, 4);
    return {{{{m, n}, randn(m * n, rng)}, {{n}, randn(n, rng)}},
            [](auto&, const auto& v) { return ad::mul(v[0], v[1]); }};
  });
  add_case("scale", [](auto& rng) -> Make {
    const auto n = pick(rng, 1, 8);
    const double s = randn(1, rng)[0];
    return {{{{n}, randn(n, rng)}}, [s](auto&, const auto& v) { return ad::scale(v[0], s); }};
  });
  add_case("transpose", [](auto& rng) -> Make {
    const auto a = pick(rng, 1, 3), b = pick(rng, 1, 3), c = pick(rng, 1, 3);
    const int x0 = static_cast<int>(pick(rng, 0, 2)), x1 = static_cast<int>(pick(rng, 0, 2));
    return {{{{a, b, c}, randn(a * b * c, rng)}},
            [x0, x1](auto&, const auto& v) { return ad::transpose(v[0], x0, x1); }};
  });
  add_case("reshape", [](auto& rng) -> Make {
    const auto a = pick(rng, 1, 4), b = pick(rng, 1, 4);
    return {{{{a, b}, randn(a * b, rng)}},
            [a, b](auto&, const auto& v) { return ad::reshape(v[0], {b, a}); }};
  });
  add_case("concat", [](auto& rng) -> Make {
    const auto m = pick(rng, 1, 3), n1 = pick(rng, 1, 3), n2 = pick(rng, 1, 3);
    return {{{{m, n1}, randn(m * n1, rng)}, {{m, n2}, randn(m * n2, rng)}},
            [](auto&, const auto& v) {
              const Var<double> parts[] = {v[0], v[1]};
              return ad::concat<double>(parts, 1);
            }};
  });
  add_case("slice", [](auto& rng) -> Make {
    const auto m = pick(rng, 1, 3), n = pick(rng, 2, 6);
    const auto b = pick(rng, 0, n - 1), e = pick(rng, b + 1, n);
    return {{{{m, n}, randn(m * n, rng)}},
            [b, e](auto&, const auto& v) { return ad::slice(v[0], 1, b, e); }};
  });
  add_case("sum_axis", [](auto& rng) -> Make {
    const auto a = pick(rng, 1, 3), b = pick(rng, 1, 3), c = pick(rng, 1, 3);
    const int ax = static_cast<int>(pick(rng, 0, 2));
    return {{{{a, b, c}, randn(a * b * c, rng)}},
            [ax](auto&, const auto& v) { return ad::sum(v[0], ax); }};
  });
  add_case("mean_axis", [](auto& rng) -> Make {
    const auto a = pick(rng, 1, 4), b = pick(rng, 1, 4);
    const int ax = static_cast<int>(pick(rng, 0, 1));
    return {{{{a, b}, randn(a * b, rng)}},
            [ax](auto&, const auto& v) { return ad::mean(v[0], ax); }};
  });
  add_case("sum_all", [](auto& rng) -> Make {
    const auto n = pick(rng, 1, 8);
    return {{{{n}, randn(n, rng)}}, [](auto&, const auto& v) { return ad::sum_all(v[0]); }};
  });
  add_case("conv1d", [](auto& rng) -> Make {
    const auto k = pick(rng, 1, 4), s = pick(rng, 1, 3), cin = pick(rng, 1, 3), cout = pick(rng, 1, 3);
    const auto t = k + pick(rng, 0, 8);
    return {{{{t, cin}, randn(t * cin, rng)}, {{k, cin, cout}, randn(k * cin * cout, rng)},
             {{cout}, randn(cout, rng)}},
            [s](auto&, const auto& v) { return ad::conv1d(v[0], v[1], std::optional(v[2]), s); }};
  });
  add_case("layer_norm", [](auto& rng) -> Make {
    const auto m = pick(rng, 1, 4), d = pick(rng, 2, 6);
    return {{{{m, d}, randn(m * d, rng)}, {{d}, randn(d, rng)}, {{d}, randn(d, rng)}},
            [](auto&, const auto& v) {
              return ad::layer_norm(v[0], std::optional(v[1]), std::optional(v[2]));
            }};
  });
  add_case("gelu", [](auto& rng) -> Make {
    const auto n = pick(rng, 1, 8);
    return {{{{n}, randn(n, rng, 2.0)}}, [](auto&, const auto& v) { return ad::gelu(v[0]); }};
  });
  add_case("relu", [](auto& rng) -> Make {
    const auto n = pick(rng, 1, 8);
    return {{{{n}, randn_away_from_zero(n, rng)}}, [](auto&, const auto& v) { return ad::relu(v[0]); }};
  });
  add_case("sigmoid", [](auto& rng) -> Make {
    const auto n = pick(rng, 1, 8);
    return {{{{n}, randn(n, rng, 3.0)}}, [](auto&, const auto& v) { return ad::sigmoid(v[0]); }};
  });
  add_case("softmax", [](auto& rng) -> Make {
    const auto m = pick(rng, 1, 3), n = pick(rng, 1, 6);
    return {{{{m, n}, randn(m * n, rng, 2.0)}}, [](auto&, const auto& v) { return ad::softmax(v[0]); }};
  });
  add_case("log_softmax", [](auto& rng) -> Make {
    const auto m = pick(rng, 1, 3), n = pick(rng, 1, 6);
    return {{{{m, n}, randn(m * n, rng, 2.0)}},
            [](auto&, const auto& v) { return ad::log_softmax(v[0]); }};
  });
  add_case("dropout", [](auto& rng) -> Make {
    const auto n = pick(rng, 1, 12);
    const auto seed = rng();
    return {{{{n}, randn(n, rng)}}, [seed](auto&, const auto& v) { return ad::dropout(v[0], 0.3, seed); }};
  });
  add_case("embedding_lookup", [](auto& rng) -> Make {
    const auto k = pick(rng, 1, 5), d = pick(rng, 1, 4), n = pick(rng, 1, 7);
    auto ids = rand_ids(n, k, rng);
    return {{{{k, d}, randn(k * d, rng)}},
            [ids](auto&, const auto& v) { return ad::embedding_lookup<double>(v[0], ids); }};
  });
  add_case("normalize_rows", [](auto& rng) -> Make {
    const auto m = pick(rng, 1, 4), d = pick(rng, 1, 5);
    return {{{{m, d}, randn_away_from_zero(m * d, rng, 0.2)}},
            [](auto&, const auto& v) { return ad::normalize_rows(v[0]); }};
  });
  add_case("replace_rows", [](auto& rng) -> Make {
    const auto m = pick(rng, 1, 5), d = pick(rng, 1, 4);
    auto mask = rand_mask(m, rng);
    return {{{{m, d}, randn(m * d, rng)}, {{d}, randn(d, rng)}},
            [mask](auto&, const auto& v) { return ad::replace_rows(v[0], mask, v[1]); }};
  });
  add_case("cross_entropy", [](auto& rng) -> Make {
    const auto n = pick(rng, 1, 5), k = pick(rng, 2, 6);
    auto ids = rand_ids(n, k, rng);
    auto mask = rand_mask(n, rng);
    return {{{{n, k}, randn(n * k, rng, 2.0)}},
            [ids, mask](auto&, const auto& v) { return ad::cross_entropy<double>(v[0], ids, mask); }};
  });
  add_case("mse", [](auto& rng) -> Make {
    const auto n = pick(rng, 1, 5), d = pick(rng, 1, 4);
    auto mask = rand_mask(n, rng);
    return {{{{n, d}, randn(n * d, rng)}, {{n, d}, randn(n * d, rng)}},
            [mask](auto&, const auto& v) { return ad::mse(v[0], v[1], mask); }};
  });
  add_case("smooth_l1", [](auto& rng) -> Make {
    const auto n = pick(rng, 1, 5), d = pick(rng, 1, 4);
    auto mask = rand_mask(n, rng);
    // Keep |pred - target| away from the beta kink.
    auto pred = randn(n * d, rng), target = pred;
    auto delta = randn_away_from_zero(n * d, rng, 0.1);
    for (std::size_t i = 0; i < delta.size(); ++i) {
      if (std::abs(std::abs(delta[i]) - 1.0) < 0.05) delta[i] *= 1.2;
      target[i] += delta[i];
    }
    return {{{{n, d}, pred}, {{n, d}, target}},
            [mask](auto&, const auto& v) { return ad::smooth_l1(v[0], v[1], 1.0, mask); }};
  });
  add_case("bce_with_logits", [](auto& rng) -> Make {
    const auto n = pick(rng, 1, 5), d = pick(rng, 1, 4);
    auto mask = rand_mask(n, rng);
    std::vector<double> y(n * d);
    for (auto& x : y) x = static_cast<double>(pick(rng, 0, 1));
    return {{{{n, d}, randn(n * d, rng, 2.0)}, {{n, d}, y, false}},
            [mask](auto&, const auto& v) { return ad::bce_with_logits(v[0], v[1], mask); }};
  });
  // Composite: a two-layer MLP through a residual layer norm, exercising
  // gradient accumulation into shared nodes.
  add_case("composite_chain", [](auto& rng) -> Make {
    const auto n = pick(rng, 2, 4), d = pick(rng, 2, 4), h = pick(rng, 2, 5);
    return {{{{n, d}, randn(n * d, rng)}, {{d, h}, randn(d * h, rng)}, {{h, d}, randn(h * d, rng)}},
            [](auto&, const auto& v) {
              auto hdn = ad::gelu(ad::matmul(v[0], v[1]));
              auto out = ad::add(v[0], ad::matmul(hdn, v[2]));
              return ad::layer_norm<double>(out, std::nullopt, std::nullopt);
            }};
  });
  return cases;
}

}  // namespace fdcheck

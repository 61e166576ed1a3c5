#include <cmath>

#include "doctest.h"

#include "mfuse/encoders.hpp"

using namespace mfuse;

namespace {

Tensor randn(Rng& rng, Shape shape, double sd = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = rng.normal(0.0, sd);
  return t;
}

ParamId id_of(const ParamStore& store, const std::string& name) {
  const auto id = store.find(name);
  REQUIRE_MESSAGE(id.has_value(), "missing parameter " << name);
  return *id;
}

const Tensor& value_of(const ParamStore& store, const std::string& name) { return store[id_of(store, name)].value; }

// x [n, in] times w [in, out] plus b, by loops.
std::vector<double> affine(const std::vector<double>& x, const Tensor& w, const Tensor& b) {
  const std::size_t in = w.dim(0), out = w.dim(1);
  std::vector<double> y(out);
  for (std::size_t j = 0; j < out; ++j) {
    double s = b[j];
    for (std::size_t i = 0; i < in; ++i) s += x[i] * w[i * out + j];
    y[j] = s;
  }
  return y;
}

void randomize(ParamStore& store, Rng& rng, double sd) {
  for (auto& p : store) {
    for (double& v : p.value.values()) v = rng.normal(0.0, sd);
  }
}

TsEncoderConfig ts_config(TsVariant v, std::size_t in) {
  TsEncoderConfig c;
  c.variant = v;
  c.input_dim = in;
  c.hidden = 8;
  c.out_dim = 6;
  c.heads = 2;
  c.ffn = 16;
  return c;
}

}  // namespace

TEST_CASE("ti encoder") {
  ParamStore store;
  Rng rng(1);
  const TiEncoder enc = TiEncoder::create(store, "ti", 2, 2, rng);
  SUBCASE("zero input and zero bias give zeros") {
    Graph g;
    Forward f(g, store, false, Rng(0));
    const Tensor out = enc(f, Tensor({3, 2}));
    for (double v : out.values()) CHECK(v == 0.0);
  }
  SUBCASE("identity weight clips negatives") {
    store[enc.fc.weight].value = Tensor({2, 2}, {1, 0, 0, 1});
    Graph g;
    Forward f(g, store, false, Rng(0));
    CHECK(enc(f, Tensor({1, 2}, {-1, 2})).data() == std::vector<double>{0, 2});
  }
  SUBCASE("matches the hand-composed primitive chain") {
    randomize(store, rng, 1.0);
    const Tensor x = randn(rng, {4, 2});
    Graph g;
    Forward f(g, store, false, Rng(0));
    const Tensor expected = g.relu(g.add(g.matmul(x, store[enc.fc.weight].value), store[enc.fc.bias].value));
    CHECK(bit_equal(enc(f, x), expected));
  }
  SUBCASE("dimension mismatch") {
    Graph g;
    Forward f(g, store, false, Rng(0));
    CHECK_THROWS_AS(enc(f, Tensor({1, 3})), ShapeError);
  }
}

TEST_CASE("every time-series variant yields finite outputs of the configured shape") {
  Rng rng(2);
  const Tensor x = randn(rng, {3, 5, 4});
  for (TsVariant v : {TsVariant::lstm, TsVariant::cnn, TsVariant::star_transformer, TsVariant::transformer_encoder}) {
    CAPTURE(to_string(v));
    ParamStore store;
    Rng init(3);
    const auto enc = TimeSeriesEncoder::create(store, "ts", ts_config(v, 4), init);
    Graph g;
    Forward f(g, store, false, Rng(0));
    const TsEncoding out = enc(f, x);
    CHECK(out.pooled.shape() == Shape{3, 8});
    const std::size_t width = v == TsVariant::transformer_encoder ? 8 : 6;
    CHECK(out.encoded.shape() == Shape{3, width});
    CHECK(enc.out_dim() == width);
    CHECK(out.sequence.shape() == Shape{3, 5, 8});
    CHECK(out.encoded.all_finite());
    CHECK(parse_ts_variant(to_string(v)) == v);
  }
  CHECK_THROWS(parse_ts_variant("gru"));
}

TEST_CASE("time-series encoders train every parameter") {
  Rng rng(4);
  const Tensor x = randn(rng, {2, 4, 3});
  for (TsVariant v : {TsVariant::lstm, TsVariant::cnn, TsVariant::star_transformer, TsVariant::transformer_encoder}) {
    CAPTURE(to_string(v));
    ParamStore store;
    Rng init(5);
    const auto enc = TimeSeriesEncoder::create(store, "ts", ts_config(v, 3), init);
    Graph g;
    Forward f(g, store, true, Rng(6));
    const Tensor readout = g.sum(g.mul(enc(f, x).encoded, randn(rng, {2, enc.out_dim()})));
    const auto grads = f.parameter_gradients(g.backward(readout));
    for (std::size_t i = 0; i < store.size(); ++i) {
      CAPTURE(store[i].name);
      bool any = false;
      for (double gv : grads[i].values()) any = any || gv != 0.0;
      if (v == TsVariant::transformer_encoder && store[i].name == "ts.positions") {
        // Only the first L rows of the position table are used.
        CHECK(any);
        continue;
      }
      CHECK(any);
    }
  }
}

TEST_CASE("lstm with all-zero parameters outputs zeros") {
  ParamStore store;
  Rng rng(7);
  const auto enc = TimeSeriesEncoder::create(store, "ts", ts_config(TsVariant::lstm, 3), rng);
  for (auto& p : store) {
    for (double& v : p.value.values()) v = 0.0;
  }
  Graph g;
  Forward f(g, store, false, Rng(0));
  const TsEncoding out = enc(f, randn(rng, {2, 5, 3}));
  for (double v : out.pooled.values()) CHECK(v == 0.0);
}

TEST_CASE("lstm is sensitive to time order") {
  ParamStore store;
  Rng rng(8);
  const auto enc = TimeSeriesEncoder::create(store, "ts", ts_config(TsVariant::lstm, 3), rng);
  const Tensor x = randn(rng, {1, 4, 3});
  Tensor reversed(x.shape());
  for (std::size_t t = 0; t < 4; ++t) {
    for (std::size_t c = 0; c < 3; ++c) reversed.at({0, t, c}) = x.at({0, 3 - t, c});
  }
  Graph g;
  Forward f(g, store, false, Rng(0));
  CHECK_FALSE(bit_equal(enc(f, x).pooled, enc(f, reversed).pooled));
}

TEST_CASE("lstm single step matches the cell equations") {
  ParamStore store;
  Rng rng(9);
  TsEncoderConfig c = ts_config(TsVariant::lstm, 2);
  c.hidden = 3;
  const auto enc = TimeSeriesEncoder::create(store, "ts", c, rng);
  const Tensor x = randn(rng, {1, 1, 2});
  Graph g;
  Forward f(g, store, false, Rng(0));
  const Tensor h = enc(f, x).pooled;
  const auto& layer = enc.lstm_layers().front();
  // h0 = c0 = 0, so only the input projection and bias matter.
  const auto z = affine({x[0], x[1]}, store[layer.input_weight].value, store[layer.bias].value);
  auto sig = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
  for (std::size_t j = 0; j < 3; ++j) {
    const double i_gate = sig(z[j]), g_gate = std::tanh(z[6 + j]), o_gate = sig(z[9 + j]);
    CHECK(h[j] == doctest::Approx(o_gate * std::tanh(i_gate * g_gate)).epsilon(1e-13));
  }
  // Forget-gate bias starts at 1.
  for (std::size_t j = 3; j < 6; ++j) CHECK(store[layer.bias].value[j] == 1.0);
}

TEST_CASE("cnn pooling on a constant-in-time input matches a brute-force convolution stack") {
  ParamStore store;
  Rng rng(10);
  TsEncoderConfig c = ts_config(TsVariant::cnn, 2);
  c.hidden = 3;
  const auto enc = TimeSeriesEncoder::create(store, "ts", c, rng);
  randomize(store, rng, 0.7);
  const std::size_t L = 7, H = 3;
  Tensor x({1, L, 2});
  for (std::size_t t = 0; t < L; ++t) {
    x.at({0, t, 0}) = 0.4;
    x.at({0, t, 1}) = -1.3;
  }
  auto conv = [&](const std::vector<std::vector<double>>& in, const Tensor& w, const Tensor& b) {
    const std::size_t cin = in[0].size();
    std::vector<std::vector<double>> out(L, std::vector<double>(H));
    for (std::size_t t = 0; t < L; ++t) {
      for (std::size_t o = 0; o < H; ++o) {
        double s = b[o];
        for (int k = 0; k < 3; ++k) {
          const int src = static_cast<int>(t) + k - 1;
          if (src < 0 || src >= static_cast<int>(L)) continue;
          for (std::size_t ci = 0; ci < cin; ++ci) s += in[src][ci] * w.at({static_cast<std::size_t>(k), ci, o});
        }
        out[t][o] = std::max(s, 0.0);
      }
    }
    return out;
  };
  std::vector<std::vector<double>> in(L, {0.4, -1.3});
  const auto h1 = conv(in, value_of(store, "ts.conv1.weight"), value_of(store, "ts.conv1.bias"));
  const auto h2 = conv(h1, value_of(store, "ts.conv2.weight"), value_of(store, "ts.conv2.bias"));
  // Two stacked kernels of width 3 reach two steps out, so positions 2..L-3
  // never see padding and agree with each other.
  for (std::size_t o = 0; o < H; ++o) {
    CHECK(h2[3][o] == doctest::Approx(h2[2][o]).epsilon(1e-14));
    CHECK(h2[4][o] == doctest::Approx(h2[2][o]).epsilon(1e-14));
  }
  Graph g;
  Forward f(g, store, false, Rng(0));
  const Tensor pooled = enc(f, x).pooled;
  for (std::size_t o = 0; o < H; ++o) {
    double m = h2[0][o];
    for (std::size_t t = 1; t < L; ++t) m = std::max(m, h2[t][o]);
    CHECK(pooled[o] == doctest::Approx(m).epsilon(1e-13));
  }
}

TEST_CASE("transformer encoder with one step attends with weight exactly 1") {
  ParamStore store;
  Rng rng(11);
  const auto enc = TimeSeriesEncoder::create(store, "ts", ts_config(TsVariant::transformer_encoder, 3), rng);
  Graph g;
  Forward f(g, store, false, Rng(0));
  std::vector<Tensor> probe;
  f.attention_probe = &probe;
  enc(f, randn(rng, {2, 1, 3}));
  REQUIRE_FALSE(probe.empty());
  for (const auto& p : probe) {
    for (double v : p.values()) CHECK(v == 1.0);
  }
}

TEST_CASE("attention rows of the transformer and star encoders sum to one") {
  Rng rng(12);
  for (TsVariant v : {TsVariant::star_transformer, TsVariant::transformer_encoder}) {
    ParamStore store;
    Rng init(13);
    const auto enc = TimeSeriesEncoder::create(store, "ts", ts_config(v, 3), init);
    Graph g;
    Forward f(g, store, false, Rng(0));
    std::vector<Tensor> probe;
    f.attention_probe = &probe;
    enc(f, randn(rng, {2, 6, 3}));
    REQUIRE_FALSE(probe.empty());
    for (const auto& p : probe) {
      const std::size_t n = p.shape().back();
      for (std::size_t r = 0; r < p.numel() / n; ++r) {
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) s += p[r * n + j];
        CHECK(std::abs(s - 1.0) <= 1e-12);
      }
    }
  }
}

TEST_CASE("star transformer") {
  ParamStore store;
  Rng rng(14);
  const std::size_t d = 4;
  const StarTransformer star = StarTransformer::create(store, "star", d, 2, rng);
  randomize(store, rng, 0.5);

  SUBCASE("zero cycles leave the initial state untouched") {
    Graph g;
    Forward f(g, store, false, Rng(0));
    const Tensor e = randn(rng, {2, 3, d});
    const auto s0 = star.initial(f, e);
    CHECK(bit_equal(s0.satellites, e));
    for (std::size_t j = 0; j < d; ++j) {
      CHECK(s0.relay.at({0, j}) == doctest::Approx((e.at({0, 0, j}) + e.at({0, 1, j}) + e.at({0, 2, j})) / 3.0));
    }
  }

  SUBCASE("a single step ring runs and stays finite") {
    Graph g;
    Forward f(g, store, false, Rng(0));
    const Tensor e = randn(rng, {2, 1, d});
    const auto s1 = star.cycle(f, star.initial(f, e), e);
    CHECK(s1.satellites.shape() == Shape{2, 1, d});
    CHECK(s1.satellites.all_finite());
    CHECK(s1.relay.all_finite());
  }

  SUBCASE("one cycle matches attention over the explicit five-element contexts") {
    const std::size_t L = 3, heads = 2, hd = d / heads;
    const Tensor e = randn(rng, {1, L, d});
    const Tensor sat = randn(rng, {1, L, d});
    const Tensor relay = randn(rng, {1, d});
    Graph g;
    Forward f(g, store, false, Rng(0));
    const auto next = star.cycle(f, {sat, relay}, e);

    auto row = [](const Tensor& t, std::size_t offset, std::size_t n) {
      return std::vector<double>(t.values().begin() + offset, t.values().begin() + offset + n);
    };
    auto lin = [&](const std::string& name, const std::vector<double>& x) {
      return affine(x, value_of(store, name + ".weight"), value_of(store, name + ".bias"));
    };
    auto layer_norm = [&](std::vector<double> x, const std::string& name) {
      double mean = 0.0, var = 0.0;
      for (double v : x) mean += v / static_cast<double>(x.size());
      for (double v : x) var += (v - mean) * (v - mean) / static_cast<double>(x.size());
      const Tensor& gain = value_of(store, name + ".gain");
      const Tensor& bias = value_of(store, name + ".bias");
      for (std::size_t j = 0; j < x.size(); ++j) x[j] = (x[j] - mean) / std::sqrt(var + 1e-5) * gain[j] + bias[j];
      return x;
    };
    auto attend = [&](const std::string& name, const std::vector<double>& query,
                      const std::vector<std::vector<double>>& context) {
      const auto q = lin(name + ".query", query);
      std::vector<double> concat(d, 0.0);
      for (std::size_t h = 0; h < heads; ++h) {
        std::vector<double> w;
        double z = 0.0;
        for (const auto& c : context) {
          const auto k = lin(name + ".key", c);
          double dot = 0.0;
          for (std::size_t j = 0; j < hd; ++j) dot += q[h * hd + j] * k[h * hd + j];
          w.push_back(std::exp(dot / std::sqrt(static_cast<double>(hd))));
          z += w.back();
        }
        for (std::size_t c = 0; c < context.size(); ++c) {
          const auto v = lin(name + ".value", context[c]);
          for (std::size_t j = 0; j < hd; ++j) concat[h * hd + j] += w[c] / z * v[h * hd + j];
        }
      }
      auto out = lin(name + ".output", concat);
      for (double& v : out) v = std::max(v, 0.0);
      return out;
    };

    std::vector<std::vector<double>> new_sats;
    for (std::size_t i = 0; i < L; ++i) {
      const std::vector<std::vector<double>> context = {
          row(sat, ((i + L - 1) % L) * d, d), row(sat, i * d, d), row(sat, ((i + 1) % L) * d, d), row(e, i * d, d),
          row(relay, 0, d)};
      new_sats.push_back(layer_norm(attend("star.satellite_attention", row(sat, i * d, d), context),
                                    "star.satellite_norm"));
      for (std::size_t j = 0; j < d; ++j) CHECK(next.satellites[i * d + j] == doctest::Approx(new_sats[i][j]).epsilon(1e-12));
    }
    std::vector<std::vector<double>> relay_context = {row(relay, 0, d)};
    for (const auto& s : new_sats) relay_context.push_back(s);
    const auto new_relay = layer_norm(attend("star.relay_attention", row(relay, 0, d), relay_context), "star.relay_norm");
    for (std::size_t j = 0; j < d; ++j) CHECK(next.relay[j] == doctest::Approx(new_relay[j]).epsilon(1e-12));
  }
}

TEST_CASE("text encoder") {
  TextEncoderConfig c;
  c.vocab = 20;
  c.width = 4;
  c.layers = 1;
  c.heads = 1;
  c.ffn = 8;
  c.max_positions = 8;
  ParamStore store;
  Rng rng(15);
  const TextEncoder enc = TextEncoder::create(store, "text", c, rng);

  SUBCASE("identical tokens without position signal attend uniformly") {
    for (double& v : store[id_of(store, "text.positions")].value.values()) v = 0.0;
    const IdMatrix ids{1, 4, {1, 1, 1, 1}};
    Graph g;
    Forward f(g, store, false, Rng(0));
    std::vector<Tensor> probe;
    f.attention_probe = &probe;
    enc(f, ids, Tensor({1, 4}, 1.0));
    REQUIRE(probe.size() == 1);
    for (double v : probe[0].values()) CHECK(v == doctest::Approx(0.25).epsilon(1e-14));
  }

  SUBCASE("masked positions do not influence the output") {
    const Tensor mask({1, 4}, {1, 0, 0, 0});
    Graph g;
    Forward f(g, store, false, Rng(0));
    const Tensor a = enc(f, IdMatrix{1, 4, {1, 5, 6, 7}}, mask).cls;
    const Tensor b = enc(f, IdMatrix{1, 4, {1, 11, 3, 19}}, mask).cls;
    CHECK(bit_equal(a, b));
  }

  SUBCASE("two-token attention matches a hand-rolled single-head reference") {
    const IdMatrix ids{1, 2, {1, 9}};
    Graph g;
    Forward f(g, store, false, Rng(0));
    std::vector<Tensor> probe;
    f.attention_probe = &probe;
    enc(f, ids, Tensor({1, 2}, 1.0));
    // Embedded inputs: layer_norm(token + position).
    std::vector<std::vector<double>> x(2, std::vector<double>(4));
    const Tensor& tok = value_of(store, "text.tokens");
    const Tensor& pos = value_of(store, "text.positions");
    for (std::size_t t = 0; t < 2; ++t) {
      const std::size_t id = static_cast<std::size_t>(ids(0, t));
      double mean = 0.0, var = 0.0;
      for (std::size_t j = 0; j < 4; ++j) {
        x[t][j] = tok.at({id, j}) + pos.at({t, j});
        mean += x[t][j] / 4.0;
      }
      for (std::size_t j = 0; j < 4; ++j) var += (x[t][j] - mean) * (x[t][j] - mean) / 4.0;
      for (std::size_t j = 0; j < 4; ++j) {
        x[t][j] = (x[t][j] - mean) / std::sqrt(var + 1e-5) * value_of(store, "text.embed_norm.gain")[j] +
                  value_of(store, "text.embed_norm.bias")[j];
      }
    }
    auto lin = [&](const std::string& name, const std::vector<double>& v) {
      return affine(v, value_of(store, name + ".weight"), value_of(store, name + ".bias"));
    };
    for (std::size_t qi = 0; qi < 2; ++qi) {
      const auto q = lin("text.layer0.attention.query", x[qi]);
      double s[2];
      for (std::size_t ki = 0; ki < 2; ++ki) {
        const auto k = lin("text.layer0.attention.key", x[ki]);
        s[ki] = 0.0;
        for (std::size_t j = 0; j < 4; ++j) s[ki] += q[j] * k[j] / 2.0;
      }
      const double p0 = 1.0 / (1.0 + std::exp(s[1] - s[0]));
      CHECK(probe[0].at({0, qi, 0}) == doctest::Approx(p0).epsilon(1e-13));
      CHECK(probe[0].at({0, qi, 1}) == doctest::Approx(1.0 - p0).epsilon(1e-13));
    }
  }

  SUBCASE("errors") {
    Graph g;
    Forward f(g, store, false, Rng(0));
    CHECK_THROWS(enc(f, IdMatrix{1, 2, {1, 20}}, Tensor({1, 2}, 1.0)));   // out of vocabulary
    CHECK_THROWS(enc(f, IdMatrix{1, 2, {1, 3}}, Tensor({1, 2}, 0.0)));    // fully masked row
    CHECK_THROWS(enc(f, IdMatrix{1, 2, {4, 3}}, Tensor({1, 2}, 1.0)));    // no classification token
    CHECK_THROWS(enc(f, IdMatrix{1, 9, std::vector<int>(9, 1)}, Tensor({1, 9}, 1.0)));  // too long
  }

  SUBCASE("heads must divide the width") {
    ParamStore s2;
    TextEncoderConfig bad = c;
    bad.heads = 3;
    CHECK_THROWS(TextEncoder::create(s2, "bad", bad, rng));
  }
}

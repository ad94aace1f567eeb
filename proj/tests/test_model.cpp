#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "doctest.h"
#include "pgc/error.hpp"
#include "pgc/model.hpp"
#include "pgc/prompt.hpp"

using namespace pgc;
using namespace pgc::model;
using tensor::Graph;
using tensor::NumArray;
using tensor::ParamStore;
using tensor::Var;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.n_enc_layers = 2;
  c.n_dec_layers = 1;
  c.d_model = 8;
  c.n_heads = 2;
  c.vocab_size = 12;
  c.max_source_len = 16;
  c.max_target_len = 8;
  return c;
}

// Brute force: for every extended id, sum alpha over positions carrying it.
std::vector<double> scatter_oracle(std::span<const double> alpha, std::span<const int> ids, std::size_t width) {
  std::vector<double> out(width, 0.0);
  for (std::size_t v = 0; v < width; ++v) {
    double s = 0.0;
    for (std::size_t l = 0; l < ids.size(); ++l)
      if (ids[l] == static_cast<int>(v)) s += alpha[l];
    out[v] = s;
  }
  return out;
}

EncoderStack manual_stack(Graph& g, std::vector<NumArray> layers) {
  EncoderStack s;
  for (auto& h : layers) s.layers.push_back(g.constant(std::move(h)));
  s.key_valid.assign(s.layers.front().value().rows(), 1);
  return s;
}

std::vector<int> random_source(std::mt19937_64& rng, const ModelConfig& c, std::size_t len) {
  std::uniform_int_distribution<int> id(1, c.vocab_size + 3);  // a few extended ids beyond V
  std::vector<int> src;
  for (std::size_t i = 0; i < len; ++i) src.push_back(id(rng));
  src.push_back(prompt::Vocabulary::kEos);
  return src;
}

}  // namespace

TEST_CASE("scatter_copy") {
  SUBCASE("repeated token collects its mass") {
    const std::vector<double> alpha{0.2, 0.5, 0.3};
    const std::vector<int> ids{7, 9, 7};  // a, b, a
    const auto p = scatter_copy(alpha, ids, 10);
    CHECK(p[7] == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(p[9] == 0.5);
    CHECK(std::count(p.begin(), p.end(), 0.0) == 8);
  }
  SUBCASE("distinct tokens re-index alpha") {
    const std::vector<double> alpha{0.1, 0.6, 0.3};
    const std::vector<int> ids{4, 0, 2};
    const auto p = scatter_copy(alpha, ids, 5);
    CHECK(p == std::vector<double>{0.6, 0.0, 0.3, 0.0, 0.1});
  }
  SUBCASE("randomised cases match the brute-force oracle exactly") {
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 500; ++trial) {
      const std::size_t len = 1 + rng() % 10;
      const std::size_t width = 3 + rng() % 12;
      std::vector<int> ids;
      std::vector<double> raw;
      for (std::size_t l = 0; l < len; ++l) {
        ids.push_back(static_cast<int>(rng() % width));
        raw.push_back(std::uniform_real_distribution<double>(0.0, 1.0)(rng));
      }
      const double total = std::accumulate(raw.begin(), raw.end(), 0.0);
      for (double& a : raw) a /= total;
      CHECK(scatter_copy(raw, ids, width) == scatter_oracle(raw, ids, width));

      Graph g;
      Var alpha = g.constant(NumArray({1, len}, raw));
      const NumArray graph_out = scatter_copy(alpha, ids, width).value();
      const auto oracle = scatter_oracle(raw, ids, width);
      CHECK(std::vector<double>(graph_out.data().begin(), graph_out.data().end()) == oracle);
    }
  }
}

TEST_CASE("copy_attention") {
  SUBCASE("one encoder layer reduces to plain masked attention") {
    ModelConfig c = tiny_config();
    c.n_enc_layers = 1;
    c.d_k = 5;
    ParamStore params = init_params(c, 11);
    const std::vector<int> src{5, 9, 13, 0, 3};  // one PAD position
    Graph g(params);
    const EncoderStack stack = encode(g, c, src);
    const std::vector<int> prefix{2, 6, 7};
    Var states = decoder_states(g, c, stack, prefix);
    const CopyAttention ca = copy_attention(g, c, states, stack);
    CHECK(ca.layer_weights.value()[0] == 1.0);

    const NumArray& s = states.value();
    const NumArray& h = stack.last().value();
    const NumArray& ws = params.value("copy.w_s");
    const NumArray& wh = params.value("copy.w_h.0");
    const std::size_t dk = 5;
    for (std::size_t t = 0; t < prefix.size(); ++t) {
      std::vector<double> q(dk, 0.0);
      for (std::size_t j = 0; j < dk; ++j)
        for (std::size_t m = 0; m < 8; ++m) q[j] += s(t, m) * ws(m, j);
      std::vector<double> score(src.size());
      for (std::size_t i = 0; i < src.size(); ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < dk; ++j) {
          double k = 0.0;
          for (std::size_t m = 0; m < 8; ++m) k += h(i, m) * wh(m, j);
          dot += q[j] * k;
        }
        score[i] = dot / std::sqrt(5.0);
      }
      double z = 0.0;
      std::vector<double> expected(src.size(), 0.0);
      for (std::size_t i = 0; i < src.size(); ++i)
        if (src[i] != 0) z += (expected[i] = std::exp(score[i]));
      for (std::size_t i = 0; i < src.size(); ++i) {
        CHECK(std::abs(ca.alpha.value()(t, i) - expected[i] / z) <= 1e-10);
      }
      CHECK(ca.alpha.value()(t, 3) == 0.0);
    }
  }

  ModelConfig c = tiny_config();
  c.d_model = 2;
  c.n_heads = 1;
  c.d_k = 2;
  ParamStore params;
  params.add("copy.w_s", NumArray::from_rows({{1, 0}, {0, 1}}));
  params.add("copy.w_h.0", NumArray::from_rows({{1, 0}, {0, 1}}));
  params.add("copy.w_h.1", NumArray::from_rows({{1, 0}, {0, 1}}));

  SUBCASE("equal logits split evenly") {
    params.add("copy.a_raw", NumArray({2}, std::vector<double>{0.3, -1.2}));
    Graph g(params);
    const EncoderStack stack = manual_stack(g, {NumArray::from_rows({{1, 2}, {1, 2}}), NumArray::from_rows({{-3, 1}, {-3, 1}})});
    const CopyAttention ca = copy_attention(g, c, g.constant(NumArray::from_rows({{0.7, -0.4}})), stack);
    CHECK(std::abs(ca.alpha.value()[0] - 0.5) <= 1e-15);
    CHECK(std::abs(ca.alpha.value()[1] - 0.5) <= 1e-15);
  }

  SUBCASE("convex combination of per-layer rows") {
    params.add("copy.a_raw", NumArray({2}, std::vector<double>{0.0, std::log(3.0)}));
    Graph g(params);
    const EncoderStack stack =
        manual_stack(g, {NumArray::from_rows({{300, 0}, {-300, 0}}), NumArray::from_rows({{-300, 0}, {300, 0}})});
    const CopyAttention ca = copy_attention(g, c, g.constant(NumArray::from_rows({{1, 0}})), stack);
    CHECK(std::abs(ca.layer_weights.value()[0] - 0.25) <= 1e-12);
    CHECK(std::abs(ca.alpha.value()[0] - 0.25) <= 1e-12);
    CHECK(std::abs(ca.alpha.value()[1] - 0.75) <= 1e-12);
  }
}

TEST_CASE("generation_gate") {
  ParamStore params;
  params.add("gate.w_c", NumArray({2, 1}, 0.0));
  params.add("gate.w_s", NumArray({2, 1}, 0.0));
  params.add("gate.b", NumArray({1}, 0.0));
  const NumArray h = NumArray::from_rows({{1, 2}, {3, -1}});
  const NumArray alpha = NumArray::from_rows({{0.25, 0.75}});
  const NumArray s = NumArray::from_rows({{1, -1}});
  auto gate = [&] {
    Graph g(params);
    const EncoderStack stack = manual_stack(g, {h});
    return generation_gate(g, g.constant(s), g.constant(alpha), stack).value()[0];
  };

  CHECK(gate() == 0.5);
  params.value("gate.b")[0] = 1e4;
  CHECK(gate() > 1.0 - 1e-12);
  CHECK(gate() < 1.0);

  // c = alpha H = [2.5, -0.25]; z = 0.5 + 0.1 + 0.3 - 0.1 - 0.1 = 0.7
  params.value("gate.w_c") = NumArray({2, 1}, std::vector<double>{0.2, -0.4});
  params.value("gate.w_s") = NumArray({2, 1}, std::vector<double>{0.3, 0.1});
  params.value("gate.b")[0] = -0.1;
  CHECK(std::abs(gate() - 0.6681877721681662) <= 1e-12);
}

TEST_CASE("vocab_distribution") {
  ParamStore params;
  params.add("out.w_v", NumArray::matrix(2, 3));
  params.add("out.b_v", NumArray({3}));
  const NumArray s = NumArray::from_rows({{1, 2}});
  auto dist = [&] {
    Graph g(params);
    return vocab_distribution(g, g.constant(s)).value();
  };
  const NumArray uniform = dist();
  for (double p : uniform.data()) CHECK(std::abs(p - 1.0 / 3.0) <= 1e-15);

  // logits = s W + b = [1, 2, 0] + [0, 0, 1]
  params.value("out.w_v") = NumArray::from_rows({{1, 0, -1}, {0, 1, 0.5}});
  params.value("out.b_v") = NumArray({3}, std::vector<double>{0, 0, 1});
  const NumArray p = dist();
  CHECK(std::abs(p[0] - 0.21194155761708547) <= 1e-12);
  CHECK(std::abs(p[1] - 0.5761168847658291) <= 1e-12);
  CHECK(std::abs(p[2] - 0.21194155761708547) <= 1e-12);

  params.value("out.b_v") = NumArray({3}, std::vector<double>{5, 5, 6});
  const NumArray shifted = dist();
  CHECK(argmax(shifted.data()) == 1);
}

TEST_CASE("mix") {
  Graph g;
  Var pv = g.constant(NumArray::from_rows({{0.5, 0.5, 0.0}}));
  Var pc = g.constant(NumArray::from_rows({{0.25, 0.0, 0.75}}));
  CHECK(model::mix(g.constant(NumArray::from_rows({{0.4}})), pv, pc).value()[0] == doctest::Approx(0.35).epsilon(1e-15));
  CHECK(model::mix(g.constant(NumArray::from_rows({{1.0}})), pv, pc).value() == pv.value());
  CHECK(model::mix(g.constant(NumArray::from_rows({{0.0}})), pv, pc).value() == pc.value());
}

TEST_CASE("encode") {
  const ModelConfig base = tiny_config();
  SUBCASE("length-one input") {
    const ParamStore params = init_params(base, 1);
    Graph g(params);
    const std::vector<int> src{3};
    const EncoderStack stack = encode(g, base, src);
    for (Var h : stack.layers) CHECK(h.value().rows() == 1);
  }
  SUBCASE("one output per encoder layer") {
    for (int n : {1, 2, 6}) {
      ModelConfig c = base;
      c.n_enc_layers = n;
      const ParamStore params = init_params(c, 2);
      Graph g(params);
      const std::vector<int> src{5, 6, 3};
      CHECK(encode(g, c, src).layers.size() == static_cast<std::size_t>(n));
    }
  }
  SUBCASE("padding suffix does not change real positions") {
    const ParamStore params = init_params(base, 3);
    Graph g(params);
    const std::vector<int> a{5, 6, 7, 3, 0, 0};
    const std::vector<int> b{5, 6, 7, 3, 0, 0, 0, 0, 0};
    const EncoderStack sa = encode(g, base, a);
    const EncoderStack sb = encode(g, base, b);
    for (std::size_t l = 0; l < sa.layers.size(); ++l)
      for (std::size_t r = 0; r < 4; ++r)
        for (std::size_t k = 0; k < 8; ++k) CHECK(std::abs(sa.layers[l].value()(r, k) - sb.layers[l].value()(r, k)) <= 1e-6);
  }
  SUBCASE("errors") {
    const ParamStore params = init_params(base, 4);
    Graph g(params);
    CHECK_THROWS_AS(encode(g, base, std::vector<int>{}), DataError);
    CHECK_THROWS_AS(encode(g, base, std::vector<int>{0, 0}), DataError);
    CHECK_THROWS_AS(encode(g, base, std::vector<int>(17, 5)), DataError);
  }
}

TEST_CASE("decode_step invariants over random draws") {
  std::mt19937_64 rng(99);
  for (int draw = 0; draw < 120; ++draw) {
    ModelConfig c = tiny_config();
    c.n_enc_layers = 1 + static_cast<int>(rng() % 3);
    c.n_dec_layers = 1 + static_cast<int>(rng() % 2);
    ParamStore params = init_params(c, rng());
    std::normal_distribution<double> noise(0.0, 2.0);
    for (const char* name : {"copy.a_raw", "gate.w_c", "gate.w_s", "gate.b"})
      for (double& x : params.value(name).data()) x = noise(rng);

    const auto src = random_source(rng, c, 1 + rng() % 8);
    const std::vector<int> prefix{prompt::Vocabulary::kBos, static_cast<int>(4 + rng() % 8)};
    Graph g(params);
    const EncoderStack stack = encode(g, c, src);
    const StepOutput out = decode_step(g, c, stack, src, prefix);

    CHECK(out.p_gen > 0.0);
    CHECK(out.p_gen < 1.0);
    double total = 0.0;
    for (double p : out.p_final) {
      CHECK(p >= 0.0);
      total += p;
    }
    CHECK(std::abs(total - 1.0) <= 1e-6);
    double w = 0.0;
    for (double x : out.layer_weights) {
      CHECK(x >= 0.0);
      w += x;
    }
    CHECK(std::abs(w - 1.0) <= 1e-12);

    // Support: OOV slots carry copy mass only; vocabulary entries absent from
    // the source carry generator mass only.
    const std::vector<double> p_copy = scatter_copy(out.alpha, src, out.p_final.size());
    for (std::size_t v = 0; v < out.p_final.size(); ++v) {
      const bool in_source = std::find(src.begin(), src.end(), static_cast<int>(v)) != src.end();
      if (!in_source) CHECK(p_copy[v] == 0.0);
      if (v >= static_cast<std::size_t>(c.vocab_size)) {
        CHECK(std::abs(out.p_final[v] - (1.0 - out.p_gen) * p_copy[v]) <= 1e-15);
      }
    }

    Graph g2(params);
    const EncoderStack stack2 = encode(g2, c, src);
    const StepOutput again = decode_step(g2, c, stack2, src, prefix);
    CHECK(again.p_final == out.p_final);
  }
}

TEST_CASE("with the gate shut, the argmax is a source token") {
  std::mt19937_64 rng(5);
  for (int draw = 0; draw < 30; ++draw) {
    const ModelConfig c = tiny_config();
    ParamStore params = init_params(c, rng());
    params.value("gate.b")[0] = -1e4;
    const auto src = random_source(rng, c, 1 + rng() % 6);
    Graph g(params);
    const EncoderStack stack = encode(g, c, src);
    const StepOutput out = decode_step(g, c, stack, src, std::vector<int>{prompt::Vocabulary::kBos});
    const int best = argmax(out.p_final);
    CHECK(std::find(src.begin(), src.end(), best) != src.end());
  }
}

TEST_CASE("greedy_decode") {
  // Hard-wired copier: zero token embeddings and residual branches leave every
  // state a normalised positional code, so position t attends to source t;
  // the gate bias forces copying.
  ModelConfig c = tiny_config();
  c.d_model = 32;
  c.n_heads = 4;
  c.d_k = 32;
  c.vocab_size = 20;
  c.max_target_len = 12;
  ParamStore params = init_params(c, 7);
  for (auto& [name, e] : params.entries()) {
    const bool silence = name == "embed" || name.ends_with(".wo") || name.ends_with(".w2") || name.ends_with(".b2");
    if (silence) e.value.fill(0.0);
  }
  for (const std::string name : {"copy.w_s", "copy.w_h.0", "copy.w_h.1"}) {
    NumArray& w = params.value(name);
    w.fill(0.0);
    for (std::size_t i = 0; i < 32; ++i) w(i, i) = 3.0;
  }
  params.value("gate.b")[0] = -1e4;

  const std::vector<int> src{7, 15, 22, 9, 21, 4, prompt::Vocabulary::kEos};
  CHECK(greedy_decode(params, c, src, 20) == std::vector<int>{7, 15, 22, 9, 21, 4});
  CHECK(greedy_decode(params, c, src, 1) == std::vector<int>{7});
}

TEST_CASE("attention export") {
  const ModelConfig c = tiny_config();
  const ParamStore params = init_params(c, 8);
  const std::vector<int> src{5, 6, 7, 8, 3};
  const std::vector<int> heads{0, 1};
  const auto mats = encoder_attention(params, c, src, c.n_enc_layers - 1, heads);
  REQUIRE(mats.size() == 2);
  for (const auto& m : mats) {
    CHECK(m.rows() == src.size());
    CHECK(m.cols() == src.size());
    for (std::size_t r = 0; r < m.rows(); ++r) {
      double s = 0.0;
      for (double v : m.row(r)) s += v;
      CHECK(std::abs(s - 1.0) <= 1e-6);
    }
  }
  CHECK_THROWS_AS(encoder_attention(params, c, src, 5, heads), UsageError);
  CHECK_THROWS_AS(encoder_attention(params, c, src, 0, std::vector<int>{2}), UsageError);

  const auto dir = std::filesystem::temp_directory_path() / "pgc_attention_test";
  std::filesystem::create_directories(dir);
  const std::vector<std::string> labels{"a", "b", "c", "d", "<eos>"};
  const auto paths = export_attention(params, c, src, labels, 1, heads, dir / "x");
  REQUIRE(paths.size() == 2);
  CHECK(paths[1].filename() == "x.layer1.head1.csv");
  std::ifstream in(paths[0]);
  std::string header, row;
  std::getline(in, header);
  std::getline(in, row);
  CHECK(header == "query,a,b,c,d,<eos>");
  CHECK(row.rfind("a,", 0) == 0);
}

TEST_CASE("model config") {
  ModelConfig c = tiny_config();
  CHECK(model_config_from_json(to_json(c)) == c);
  CHECK(config_hash(c) == config_hash(model_config_from_json(to_json(c))));
  ModelConfig d = c;
  d.d_model = 16;
  CHECK(config_hash(c) != config_hash(d));

  auto j = to_json(c);
  j["d_modle"] = 4;
  CHECK_THROWS_AS(model_config_from_json(j), UsageError);

  d.n_heads = 3;
  CHECK_THROWS_AS(d.validate(), UsageError);
}

#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "rlqfs/errors.hpp"
#include "rlqfs/model/checkpoint.hpp"
#include "rlqfs/model/transformer.hpp"
#include "test_util.hpp"

using namespace rlqfs;
using model::ModelConfig;
using model::PassageEncoder;
using model::Seq2SeqModel;
using nd::Tensor;
using nd::TokenId;

namespace {

ModelConfig tiny(std::size_t vocab = 20) {
  ModelConfig c;
  c.vocab_size = vocab;
  c.d_model = 8;
  c.n_heads = 2;
  c.n_enc_layers = 1;
  c.n_dec_layers = 1;
  c.ffn_dim = 16;
  c.max_positions = 16;
  c.init_std = 0.3;  // larger than default so differences are visible
  return c;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

bool rows_equal(const Tensor& a, const Tensor& b, std::size_t row) {
  const std::size_t w = a.dim(1);
  for (std::size_t c = 0; c < w; ++c)
    if (a.at(row, c) != b.at(row, c)) return false;
  return true;
}

}  // namespace

TEST_SUITE("config") {
  TEST_CASE("validation names the offending field") {
    ModelConfig c = tiny();
    c.n_heads = 3;
    CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("n_heads"), ConfigError);
    c = tiny();
    c.dropout_p = 1.0;
    CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("dropout_p"), ConfigError);
    c = tiny();
    c.vocab_size = 0;
    CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("vocab_size"), ConfigError);
    CHECK_NOTHROW(tiny().validate());
  }
}

TEST_SUITE("seq2seq") {
  TEST_CASE("shapes") {
    nd::Rng rng(1);
    Seq2SeqModel m(tiny(), rng);
    std::vector<TokenId> src{1, 7, 8, 9, 2};
    Tensor mem = m.encode(src);
    CHECK(mem.shape() == nd::Shape{5, 8});
    std::vector<TokenId> tgt{1, 10, 11};
    CHECK(m.decode(tgt, mem).shape() == nd::Shape{3, 20});
  }

  TEST_CASE("over-length and empty inputs are contract errors") {
    nd::Rng rng(1);
    Seq2SeqModel m(tiny(), rng);
    std::vector<TokenId> long_src(17, 7);
    CHECK_THROWS_AS(m.encode(long_src), ContractError);
    CHECK_THROWS_AS(m.encode(std::vector<TokenId>{}), ContractError);
    Tensor mem = m.encode(std::vector<TokenId>{1, 2});
    CHECK_THROWS_AS(m.decode(long_src, mem), ContractError);
    CHECK_THROWS_AS(m.decode(std::vector<TokenId>{1}, Tensor::zeros({2, 5})), DimensionError);
  }

  TEST_CASE("different documents give different memories") {
    nd::Rng rng(2);
    Seq2SeqModel m(tiny(), rng);
    Tensor a = m.encode(std::vector<TokenId>{1, 7, 8, 2});
    Tensor b = m.encode(std::vector<TokenId>{1, 9, 8, 2});
    CHECK(max_abs_diff(a, b) > 1e-3);
  }

  TEST_CASE("values stored at pad positions do not reach real positions") {
    nd::Rng rng(3);
    Seq2SeqModel m(tiny(), rng);
    std::vector<TokenId> a{1, 7, 8, 2, 0, 0};
    std::vector<TokenId> b{1, 7, 8, 2, 13, 19};
    model::Mask valid{1, 1, 1, 1, 0, 0};
    Tensor ma = m.encode(a, valid), mb = m.encode(b, valid);
    for (std::size_t r = 0; r < 4; ++r) CHECK(rows_equal(ma, mb, r));
    std::vector<TokenId> tgt{1, 9, 10};
    CHECK(max_abs_diff(m.decode(tgt, ma, valid), m.decode(tgt, mb, valid)) == 0.0);
  }

  TEST_CASE("decoder is causal") {
    nd::Rng rng(4);
    Seq2SeqModel m(tiny(), rng);
    Tensor mem = m.encode(std::vector<TokenId>{1, 7, 8, 2});
    std::vector<TokenId> base{1, 9, 10, 11, 12, 13};
    Tensor ref = m.decode(base, mem);
    for (std::size_t t = 1; t < base.size(); ++t) {
      auto alt = base;
      for (std::size_t j = t; j < alt.size(); ++j) alt[j] = static_cast<TokenId>(7 + (alt[j] + 5) % 13);
      Tensor out = m.decode(alt, mem);
      for (std::size_t r = 0; r < t; ++r) CHECK(rows_equal(ref, out, r));
      CHECK_FALSE(rows_equal(ref, out, t));
    }
  }

  TEST_CASE("one-hot mixtures of token embeddings match the id path") {
    nd::Rng rng(5);
    Seq2SeqModel m(tiny(), rng);
    Tensor mem = m.encode(std::vector<TokenId>{1, 7, 8, 2});
    std::vector<TokenId> tgt{1, 14, 3, 9};
    std::vector<double> onehot(tgt.size() * 20, 0.0);
    for (std::size_t t = 0; t < tgt.size(); ++t) onehot[t * 20 + static_cast<std::size_t>(tgt[t])] = 1.0;
    Tensor mix = nd::matmul(Tensor::from({tgt.size(), 20}, onehot), m.token_embedding());
    CHECK(max_abs_diff(m.decode(tgt, mem), m.decode_embedded(mix, mem)) <= 1e-9);
  }

  TEST_CASE("cross-attention carries gradient into the encoder memory") {
    nd::Rng rng(6);
    Seq2SeqModel m(tiny(), rng);
    Tensor mem = m.encode(std::vector<TokenId>{1, 7, 8, 2}).detach();
    mem.set_requires_grad(true);
    mem.zero_grad();
    nd::backward(nd::sum(m.decode(std::vector<TokenId>{1, 9}, mem)));
    double norm = 0;
    for (double g : mem.grad()) norm += g * g;
    CHECK(norm > 1e-12);
  }

  TEST_CASE("output projection is tied to the token embedding") {
    nd::Rng rng(7);
    Seq2SeqModel m(tiny(), rng);
    auto ps = m.params();
    nd::zero_grads(ps);
    Tensor mem = m.encode(std::vector<TokenId>{1, 7, 2});
    std::vector<TokenId> tgt{1, 8};
    std::vector<TokenId> gold{8, 15};
    nd::backward(nd::cross_entropy(m.decode(tgt, mem), gold));
    // Row 15 is never an input, so its gradient can only come through the output layer.
    Tensor tok = m.token_embedding();
    double g15 = 0;
    for (std::size_t c = 0; c < 8; ++c) g15 += std::abs(tok.grad()[15 * 8 + c]);
    CHECK(g15 > 0.0);
    for (const auto& p : ps) CHECK(p.name.find("out") == std::string::npos);
    // One update moves the projection and the embedding together.
    const std::vector<double> before(tok.data().begin(), tok.data().end());
    nd::Optimizer opt({nd::OptimizerKind::SGD, 0.1});
    opt.step(ps);
    Tensor after_logits = m.decode(tgt, m.encode(std::vector<TokenId>{1, 7, 2}));
    CHECK(tok.data()[15 * 8] != before[15 * 8]);
    CHECK(std::isfinite(after_logits.at(0, 0)));
  }

  TEST_CASE("eval-mode passes are bit-identical") {
    nd::Rng rng(8);
    ModelConfig c = tiny();
    c.dropout_p = 0.3;
    Seq2SeqModel m(c, rng);
    std::vector<TokenId> src{1, 7, 8, 2}, tgt{1, 9, 10};
    Tensor a = m.decode(tgt, m.encode(src));
    Tensor b = m.decode(tgt, m.encode(src));
    CHECK(max_abs_diff(a, b) == 0.0);
    nd::Rng drop(1);
    Tensor t = m.decode(tgt, m.encode(src, {}, {true, &drop}), {}, {true, &drop});
    CHECK(max_abs_diff(a, t) > 0.0);
  }

  TEST_CASE("full-model finite-difference check on a small subset of weights") {
    nd::Rng rng(9);
    ModelConfig c = tiny(12);
    c.init_std = 0.5;
    Seq2SeqModel m(c, rng);
    std::vector<TokenId> src{1, 7, 8, 2}, tgt{1, 9, 10}, gold{9, 10, 2};
    std::vector<Tensor> inputs;
    for (const auto& p : m.params()) inputs.push_back(p.tensor);
    // Key biases get exactly zero gradient (softmax shift), so FD noise needs a larger floor.
    auto r = testing::gradcheck([&] { return nd::cross_entropy(m.decode(tgt, m.encode(src)), gold); }, inputs,
                                1e-5, 1e-4, 6);
    CHECK(r.checked > 100);
    CHECK(r.max_rel_err <= 1e-5);
  }
}

TEST_SUITE("positional extension") {
  TEST_CASE("prefix copied, tail fresh, identity at equal length") {
    nd::Rng rng(1);
    Tensor table = testing::random_const({8, 4}, rng);
    nd::Rng r1(10), r2(11);
    Tensor e1 = model::extend_positional(table, 12, r1, 0.02);
    Tensor e2 = model::extend_positional(table, 12, r2, 0.02);
    CHECK(e1.shape() == nd::Shape{12, 4});
    for (std::size_t i = 0; i < 32; ++i) CHECK(e1.data()[i] == table.data()[i]);
    bool any_nonzero = false, differs = false;
    for (std::size_t i = 32; i < 48; ++i) {
      any_nonzero |= e1.data()[i] != 0.0;
      differs |= e1.data()[i] != e2.data()[i];
    }
    CHECK(any_nonzero);
    CHECK(differs);
    Tensor same = model::extend_positional(table, 8, r1, 0.02);
    CHECK(max_abs_diff(same, table) == 0.0);
    CHECK_THROWS_AS(model::extend_positional(table, 7, r1, 0.02), ContractError);
  }

  TEST_CASE("model accepts longer inputs after extension") {
    nd::Rng rng(2);
    Seq2SeqModel m(tiny(), rng);
    std::vector<TokenId> src(20, 7);
    CHECK_THROWS_AS(m.encode(src), ContractError);
    m.extend_positions(24, rng);
    CHECK(m.config().max_positions == 24);
    CHECK(m.encode(src).shape() == nd::Shape{20, 8});
  }
}

TEST_SUITE("passage encoder") {
  TEST_CASE("embedding is the position-0 hidden state") {
    nd::Rng rng(1);
    PassageEncoder enc(tiny(), 6, rng);
    std::vector<TokenId> ids{6, 9, 10, 11};
    Tensor e = enc.embed(ids);
    CHECK(e.shape() == nd::Shape{8});
    Tensor h = enc.hidden(ids);
    for (std::size_t c = 0; c < 8; ++c) CHECK(e.at(c) == h.at(0, c));
    CHECK(max_abs_diff(e, enc.embed(ids)) == 0.0);
    CHECK(enc.mlm_logits(h).shape() == nd::Shape{4, 20});
  }

  TEST_CASE("missing representation token is a contract error") {
    nd::Rng rng(1);
    PassageEncoder enc(tiny(), 6, rng);
    CHECK_THROWS_AS(enc.embed(std::vector<TokenId>{9, 10}), ContractError);
  }

  TEST_CASE("changing any token changes the embedding") {
    nd::Rng rng(2);
    PassageEncoder enc(tiny(), 6, rng);
    std::vector<TokenId> ids{6, 9, 10, 11, 12};
    Tensor base = enc.embed(ids);
    for (std::size_t i = 1; i < ids.size(); ++i) {
      auto alt = ids;
      alt[i] = 15;
      CHECK(max_abs_diff(base, enc.embed(alt)) > 1e-9);
    }
  }

  TEST_CASE("encoder gradients check out") {
    nd::Rng rng(3);
    ModelConfig c = tiny(12);
    c.init_std = 0.5;
    PassageEncoder enc(c, 6, rng);
    std::vector<TokenId> ids{6, 9, 10}, tgt{-1, 7, 11};
    std::vector<Tensor> inputs;
    for (const auto& p : enc.params()) inputs.push_back(p.tensor);
    auto r = testing::gradcheck(
        [&] {
          Tensor h = enc.hidden(ids);
          return nd::add(nd::cross_entropy(enc.mlm_logits(h), tgt), testing::weighted_sum(enc.embed(ids)));
        },
        inputs, 1e-5, 1e-4, 6);
    CHECK(r.max_rel_err <= 1e-5);
  }
}

TEST_SUITE("checkpoint") {
  model::Checkpoint sample() {
    nd::Rng rng(4);
    Seq2SeqModel m(tiny(), rng);
    model::Checkpoint c;
    c.kind = "seq2seq";
    c.config = m.config();
    c.vocab_hash = 0xabcdef0123456789ULL;
    c.seed = 17;
    c.step = 42;
    c.meta["note"] = "x";
    c.meta["lr"] = model::encode_real(0.1 + 0.2);
    for (const auto& p : m.params()) c.tensors.push_back({p.name, p.tensor.clone()});
    return c;
  }

  TEST_CASE("encode/decode roundtrip is bit-exact") {
    auto c = sample();
    auto bytes = model::encode_checkpoint(c);
    auto d = model::decode_checkpoint(bytes);
    CHECK(d.kind == c.kind);
    CHECK(d.config == c.config);
    CHECK(d.vocab_hash == c.vocab_hash);
    CHECK(d.seed == 17);
    CHECK(d.step == 42);
    CHECK(d.meta == c.meta);
    CHECK(model::decode_real(d.meta["lr"]) == 0.1 + 0.2);
    REQUIRE(d.tensors.size() == c.tensors.size());
    for (std::size_t i = 0; i < c.tensors.size(); ++i) {
      CHECK(d.tensors[i].name == c.tensors[i].name);
      CHECK(d.tensors[i].tensor.shape() == c.tensors[i].tensor.shape());
      CHECK(max_abs_diff(d.tensors[i].tensor, c.tensors[i].tensor) == 0.0);
    }
    CHECK(model::encode_checkpoint(d) == bytes);
  }

  TEST_CASE("file roundtrip and loading into a fresh model") {
    auto c = sample();
    auto path = std::filesystem::temp_directory_path() / "rlqfs_test_model.ckpt";
    model::save_checkpoint(path, c);
    auto d = model::load_checkpoint(path);
    std::filesystem::remove(path);
    nd::Rng rng(99);
    Seq2SeqModel fresh(tiny(), rng);
    fresh.load_params(model::stored_weights(d, fresh.params()));
    nd::Rng rng2(4);
    Seq2SeqModel orig(tiny(), rng2);
    std::vector<TokenId> src{1, 7, 2}, tgt{1, 9};
    CHECK(max_abs_diff(fresh.decode(tgt, fresh.encode(src)), orig.decode(tgt, orig.encode(src))) == 0.0);
  }

  TEST_CASE("damaged files raise format errors with offsets") {
    auto bytes = model::encode_checkpoint(sample());
    auto bad_magic = bytes;
    bad_magic[0] = 'X';
    CHECK_THROWS_AS(model::decode_checkpoint(bad_magic), FormatError);

    auto bad_version = bytes;
    bad_version[8] = 9;
    try {
      model::decode_checkpoint(bad_version);
      FAIL("expected FormatError");
    } catch (const FormatError& e) {
      CHECK(e.offset() == 8);
      CHECK(std::string(e.what()).find("version") != std::string::npos);
    }

    for (std::size_t cut : {std::size_t{4}, std::size_t{30}, bytes.size() / 2, bytes.size() - 1}) {
      std::vector<std::uint8_t> t(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(cut));
      CHECK_THROWS_AS(model::decode_checkpoint(t), FormatError);
    }

    auto flipped = bytes;
    flipped[bytes.size() - 20] ^= 0x01;
    CHECK_THROWS_WITH_AS(model::decode_checkpoint(flipped), doctest::Contains("checksum"), FormatError);
  }

  TEST_CASE("optimizer state survives a roundtrip") {
    nd::Rng rng(5);
    Seq2SeqModel m(tiny(), rng);
    auto ps = m.params();
    nd::Optimizer opt({});
    nd::zero_grads(ps);
    nd::backward(nd::sum(m.decode(std::vector<TokenId>{1, 9}, m.encode(std::vector<TokenId>{1, 7}))));
    opt.step(ps);
    model::Checkpoint c;
    c.kind = "seq2seq";
    c.config = m.config();
    append_optimizer_state(c, ps, opt);
    auto d = model::decode_checkpoint(model::encode_checkpoint(c));
    nd::Optimizer fresh({});
    model::restore_optimizer_state(d, ps, fresh);
    CHECK(fresh.steps_taken() == 1);
    CHECK(fresh.first_moments() == opt.first_moments());
    CHECK(fresh.second_moments() == opt.second_moments());
    model::Checkpoint empty;
    CHECK_THROWS_AS(model::stored_weights(empty, ps), DataError);
  }
}

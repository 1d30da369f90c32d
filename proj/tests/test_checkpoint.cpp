#include "ornn/checkpoint.hpp"

#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <sstream>

using namespace ornn;

namespace {

void put(std::string& s, std::uint64_t v, int n) {
  for (int i = 0; i < n; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_name(std::string& s, const std::string& name) {
  put(s, name.size(), 8);
  s += name;
}

void expect_same(const Model& a, const Model& b) {
  ASSERT_EQ(a.index(), b.index());
  const auto ta = tensors(a), tb = tensors(b);
  ASSERT_EQ(ta.size(), tb.size());
  for (std::size_t k = 0; k < ta.size(); ++k) {
    EXPECT_EQ(ta[k].name, tb[k].name);
    EXPECT_TRUE(*ta[k].value == *tb[k].value) << ta[k].name;
  }
}

}  // namespace

TEST(Checkpoint, ByteLayoutOfTinyModel) {
  const Model m = LtRnnParams{Matrix::Constant(1, 1, 1.5), Matrix::Constant(1, 1, -2.0),
                              Matrix::Constant(1, 1, 0.25), Matrix::Constant(1, 1, 3.0),
                              Nonlinearity::relu};
  std::ostringstream os;
  write_checkpoint(os, Checkpoint{m, 7, std::nullopt, "{}"});

  std::string expected = "ORNNCKPT";
  put(expected, 1, 4);  // version
  put(expected, 1, 4);  // architecture: LT-RNN
  put(expected, 1, 4);  // nonlinearity: relu
  put(expected, 0, 4);  // pool
  put(expected, 0, 4);  // peephole
  put(expected, 7, 8);  // update
  put_name(expected, "{}");
  put(expected, 4, 4);  // tensor count
  const std::pair<const char*, std::uint64_t> entries[] = {
      {"U", 0x3FF8000000000000ull}, {"V", 0xC000000000000000ull},
      {"b", 0x3FD0000000000000ull}, {"W", 0x4008000000000000ull}};
  for (const auto& [name, bits] : entries) {
    put_name(expected, name);
    put(expected, 1, 8);
    put(expected, 1, 8);
    put(expected, bits, 8);
  }
  put(expected, 0, 4);  // no optimizer section
  put(expected, 0, 8);  // loss accumulator: sum
  put(expected, 0, 8);  //                   count
  EXPECT_EQ(os.str(), expected);
}

TEST(Checkpoint, RowMajorOrder) {
  const Model m = LtRnnParams{(Matrix(2, 3) << 1, 2, 3, 4, 5, 6).finished(), Matrix::Zero(2, 2),
                              Matrix::Zero(2, 1), Matrix::Zero(1, 2)};
  std::ostringstream os;
  write_checkpoint(os, Checkpoint{m, 0, std::nullopt, ""});
  const std::string bytes = os.str();
  // Header 8 + 5*4 + 8 + 8 (empty config) + 4, then "U": 8 + 1 + 16 of shape.
  const std::size_t first = 8 + 20 + 8 + 8 + 4 + 9 + 16;
  double second_entry = 0;
  std::memcpy(&second_entry, bytes.data() + first + 8, 8);
  EXPECT_EQ(second_entry, 2.0);
}

TEST(Checkpoint, RoundTripEveryArchitecture) {
  SeededRng rng(1, 0);
  for (Architecture a : {Architecture::srnn, Architecture::ltrnn, Architecture::lstm, Architecture::pooled}) {
    for (bool peephole : {false, true}) {
      if (peephole && a != Architecture::lstm) continue;
      ModelShape shape{a, 3, 6, 2, Nonlinearity::tanh, peephole, 3};
      const Model m = random_model(shape, rng, 1.0);
      RmsPropState st = RmsPropState::for_model(m, 1e-3, 0.95);
      st.step = 12;
      for (auto& t : tensors(st.cache)) *t.value = rng.uniform_matrix(t.value->rows(), t.value->cols(), 0, 1);
      std::stringstream ss;
      write_checkpoint(ss, Checkpoint{m, 99, st, "{\"a\":1}", 2.5, 3});
      const Checkpoint back = read_checkpoint(ss);
      expect_same(back.model, m);
      EXPECT_EQ(back.update, 99u);
      EXPECT_EQ(back.config_json, "{\"a\":1}");
      EXPECT_EQ(back.loss_sum, 2.5);
      EXPECT_EQ(back.loss_count, 3u);
      ASSERT_TRUE(back.optimizer.has_value());
      EXPECT_EQ(back.optimizer->decay, 0.95);
      EXPECT_EQ(back.optimizer->learning_rate, 1e-3);
      EXPECT_EQ(back.optimizer->step, 12u);
      expect_same(back.optimizer->cache, st.cache);
      if (a == Architecture::pooled) EXPECT_EQ(std::get<PooledLtRnnParams>(back.model).pool, 3);
    }
  }
}

TEST(Checkpoint, RejectsCorruptInput) {
  SeededRng rng(2, 0);
  const Model m = random_model({Architecture::ltrnn, 2, 3, 1}, rng, 1.0);
  std::ostringstream os;
  write_checkpoint(os, Checkpoint{m, 1, std::nullopt, "{}"});
  const std::string good = os.str();

  const auto fails = [](std::string bytes) {
    std::istringstream is(bytes);
    EXPECT_THROW(read_checkpoint(is), CheckpointError);
  };
  std::string bad_magic = good;
  bad_magic[0] = 'X';
  fails(bad_magic);
  fails(good.substr(0, good.size() - 5));
  fails(good + "x");
  std::string bad_version = good;
  bad_version[8] = 9;
  fails(bad_version);
  std::string bad_arch = good;
  bad_arch[12] = 7;
  fails(bad_arch);
}

TEST(Checkpoint, FileSaveAndLoad) {
  SeededRng rng(3, 0);
  const Model m = random_model({Architecture::pooled, 2, 4, 1}, rng, 1.0);
  const auto path = std::filesystem::temp_directory_path() / "ornn_ckpt_test.bin";
  save_checkpoint(path, Checkpoint{m, 5, std::nullopt, "cfg"});
  EXPECT_FALSE(std::filesystem::exists(path.string() + ".tmp"));
  expect_same(load_checkpoint(path).model, m);
  std::filesystem::remove(path);
  EXPECT_THROW(load_checkpoint(path), CheckpointError);
}

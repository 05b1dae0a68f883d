#include <random>
#include <sstream>

#include <gtest/gtest.h>

#include "crag/model_io.hpp"
#include "crag/toys.hpp"

using namespace crag;

namespace {

ModelState sample_state() {
  std::mt19937_64 rng(11);
  ModelState s;
  s.retriever = RetrieverParams::identity(4, 0.3);
  s.retriever.projection(1, 2) = 1.0 / 3.0;
  s.generator = GeneratorParams::random(8, 5, 2, rng);
  s.gating = {random_matrix(3, 3, 0.7, rng), 2};
  for (int e = 0; e < 3; ++e) s.experts.maps.push_back(random_matrix(1, 3, 1.0, rng));
  s.weights = {{0.25, 0.75}, 0.1, DroSense::BestCase};
  s.version = 42;
  return s;
}

ErrorCode read_error(const std::string& text) {
  std::istringstream in(text);
  try {
    read_model(in);
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "expected a parse failure";
  return ErrorCode::InvalidArgument;
}

}  // namespace

TEST(ModelIo, RoundTripIsExact) {
  const ModelState s = sample_state();
  std::stringstream buf;
  write_model(buf, s);
  const ModelState back = read_model(buf);
  EXPECT_EQ(back, s);
  std::stringstream again;
  write_model(again, back);
  std::stringstream first;
  write_model(first, s);
  EXPECT_EQ(again.str(), first.str());
}

TEST(ModelIo, EmptyGatingAndExperts) {
  ModelState s;
  s.retriever = RetrieverParams::identity(2);
  std::mt19937_64 rng(1);
  s.generator = GeneratorParams::random(4, 3, 1, rng);
  s.weights = DomainWeights::uniform(3);
  std::stringstream buf;
  write_model(buf, s);
  EXPECT_EQ(read_model(buf), s);
}

TEST(ModelIo, RejectsBadInput) {
  std::stringstream buf;
  write_model(buf, sample_state());
  const std::string good = buf.str();
  EXPECT_EQ(read_error("crag-model/0\n" + good.substr(good.find('\n') + 1)), ErrorCode::ParseError);
  EXPECT_EQ(read_error(good.substr(0, good.size() / 2)), ErrorCode::ParseError);
  std::string bad_value = good;
  bad_value.replace(bad_value.find("version 42"), 10, "version x2");
  EXPECT_EQ(read_error(bad_value), ErrorCode::ParseError);
  std::string bad_sense = good;
  bad_sense.replace(bad_sense.find("best_case"), 9, "best_guess");
  EXPECT_EQ(read_error(bad_sense), ErrorCode::ParseError);
  EXPECT_EQ(read_error(""), ErrorCode::ParseError);
}

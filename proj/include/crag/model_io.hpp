#pragma once

// ModelState file format "crag-model/1": a versioned text header followed by
// named scalars and matrices; matrix values are row-major, one row per line,
// printed with 17 significant digits so a round trip is exact.

#include <cstdio>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>

#include "crag/core.hpp"
#include "crag/multilevel.hpp"

namespace crag {

inline constexpr const char* kModelFormat = "crag-model/1";

namespace model_io_detail {

inline std::string num(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

inline void write_matrix(std::ostream& out, const std::string& name, const Matrix<double>& m) {
  out << "matrix " << name << ' ' << m.rows << ' ' << m.cols << '\n';
  for (std::size_t r = 0; r < m.rows; ++r) {
    for (std::size_t c = 0; c < m.cols; ++c) out << (c ? " " : "") << num(m(r, c));
    out << '\n';
  }
}

class Reader {
 public:
  explicit Reader(std::istream& in) : in_(in) {}

  void expect(const std::string& word) {
    const std::string got = token();
    require(got == word, ErrorCode::ParseError,
            "model file: expected '" + word + "', found '" + got + "'");
  }

  std::string token() {
    std::string t;
    require(static_cast<bool>(in_ >> t), ErrorCode::ParseError, "model file: unexpected end");
    return t;
  }

  template <typename T>
  T value() {
    const std::string t = token();
    std::istringstream ss(t);
    T v{};
    ss >> v;
    require(!ss.fail() && ss.eof(), ErrorCode::ParseError, "model file: bad value '" + t + "'");
    return v;
  }

  Matrix<double> matrix(const std::string& name) {
    expect("matrix");
    expect(name);
    const auto rows = value<std::size_t>();
    const auto cols = value<std::size_t>();
    Matrix<double> m(rows, cols);
    for (double& x : m.data) x = value<double>();
    return m;
  }

 private:
  std::istream& in_;
};

}  // namespace model_io_detail

inline void write_model(std::ostream& out, const ModelState& s) {
  using namespace model_io_detail;
  out << kModelFormat << '\n';
  out << "version " << s.version << '\n';
  out << "retriever.alpha " << num(s.retriever.alpha) << '\n';
  out << "retriever.temperature " << num(s.retriever.temperature) << '\n';
  write_matrix(out, "retriever.projection", s.retriever.projection);
  write_matrix(out, "generator.w1", s.generator.w1);
  write_matrix(out, "generator.w2", s.generator.w2);
  out << "gating.top_k " << s.gating.top_k << '\n';
  write_matrix(out, "gating.wg", s.gating.wg);
  out << "experts " << s.experts.maps.size() << '\n';
  for (std::size_t i = 0; i < s.experts.maps.size(); ++i) {
    write_matrix(out, "experts." + std::to_string(i), s.experts.maps[i]);
  }
  out << "weights.epsilon " << num(s.weights.epsilon) << '\n';
  out << "weights.sense " << to_string(s.weights.sense) << '\n';
  out << "weights.w " << s.weights.w.size();
  for (double w : s.weights.w) out << ' ' << num(w);
  out << "\nend\n";
}

inline ModelState read_model(std::istream& in) {
  model_io_detail::Reader r(in);
  r.expect(kModelFormat);
  ModelState s;
  r.expect("version");
  s.version = r.value<Tick>();
  r.expect("retriever.alpha");
  s.retriever.alpha = r.value<double>();
  r.expect("retriever.temperature");
  s.retriever.temperature = r.value<double>();
  s.retriever.projection = r.matrix("retriever.projection");
  s.generator.w1 = r.matrix("generator.w1");
  s.generator.w2 = r.matrix("generator.w2");
  r.expect("gating.top_k");
  s.gating.top_k = r.value<std::size_t>();
  s.gating.wg = r.matrix("gating.wg");
  r.expect("experts");
  const auto n = r.value<std::size_t>();
  for (std::size_t i = 0; i < n; ++i) s.experts.maps.push_back(r.matrix("experts." + std::to_string(i)));
  r.expect("weights.epsilon");
  s.weights.epsilon = r.value<double>();
  r.expect("weights.sense");
  const std::string sense = r.token();
  try {
    s.weights.sense = dro_sense_from_string(sense);
  } catch (const Error&) {
    throw Error(ErrorCode::ParseError, "model file: bad sense '" + sense + "'");
  }
  r.expect("weights.w");
  const auto m = r.value<std::size_t>();
  for (std::size_t i = 0; i < m; ++i) s.weights.w.push_back(r.value<double>());
  r.expect("end");
  return s;
}

}  // namespace crag

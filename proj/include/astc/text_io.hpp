#pragma once

#include "astc/common.hpp"

#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

namespace astc {

/// Self-describing key-value text document used for every saved artifact.
///
/// Layout: a first line `#astc <kind> v1`, then one `key value...` line per
/// entry. Scalars are written as a single token, vectors as `n v_1 ... v_n`,
/// matrices as `rows cols` followed by the row-major entries. Doubles use the
/// shortest round-trip decimal form, so save/load is bit-exact.
class TextDoc {
 public:
  TextDoc() = default;
  explicit TextDoc(std::string kind) : kind_(std::move(kind)) {}

  const std::string& kind() const { return kind_; }

  void put(const std::string& key, const std::string& value) { add(key, value); }
  void put(const std::string& key, const char* value) { add(key, value); }
  void put_double(const std::string& key, double v) { add(key, fmt_double(v)); }
  void put_int(const std::string& key, long long v) { add(key, std::to_string(v)); }

  void put_vec(const std::string& key, const Vec& v) {
    std::string s = std::to_string(v.size());
    for (Eigen::Index i = 0; i < v.size(); ++i) s += ' ' + fmt_double(v[i]);
    add(key, s);
  }

  void put_mat(const std::string& key, const Mat& m) {
    std::string s = std::to_string(m.rows()) + ' ' + std::to_string(m.cols());
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c) s += ' ' + fmt_double(m(r, c));
    add(key, s);
  }

  bool has(const std::string& key) const { return index_.count(key) != 0; }

  const std::string& raw(const std::string& key) const {
    auto it = index_.find(key);
    if (it == index_.end()) throw DataError(kind_ + ": missing key '" + key + "'");
    return entries_[it->second].second;
  }

  double get_double(const std::string& key) const { return parse_double(raw(key)); }
  long long get_int(const std::string& key) const { return parse_int(raw(key)); }

  Vec get_vec(const std::string& key) const {
    auto tok = tokens(raw(key));
    if (tok.empty()) throw DataError(kind_ + ": empty vector '" + key + "'");
    auto n = parse_int(tok[0]);
    if (n < 0 || static_cast<std::size_t>(n) + 1 != tok.size())
      throw DataError(kind_ + ": vector '" + key + "' has wrong length");
    Vec v(n);
    for (long long i = 0; i < n; ++i) v[i] = parse_double(tok[static_cast<std::size_t>(i) + 1]);
    return v;
  }

  Mat get_mat(const std::string& key) const {
    auto tok = tokens(raw(key));
    if (tok.size() < 2) throw DataError(kind_ + ": bad matrix '" + key + "'");
    auto r = parse_int(tok[0]);
    auto c = parse_int(tok[1]);
    if (r < 0 || c < 0 || static_cast<std::size_t>(r * c) + 2 != tok.size())
      throw DataError(kind_ + ": matrix '" + key + "' has wrong size");
    Mat m(r, c);
    std::size_t k = 2;
    for (long long i = 0; i < r; ++i)
      for (long long j = 0; j < c; ++j) m(i, j) = parse_double(tok[k++]);
    return m;
  }

  std::string str() const {
    std::string out = "#astc " + kind_ + " v1\n";
    for (const auto& [k, v] : entries_) out += k + ' ' + v + '\n';
    return out;
  }

  static TextDoc parse(const std::string& text, const std::string& expected_kind) {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line)) throw DataError("empty artifact, expected " + expected_kind);
    auto head = tokens(line);
    if (head.size() != 3 || head[0] != "#astc" || head[2] != "v1")
      throw DataError("not an astc artifact (expected " + expected_kind + ")");
    if (head[1] != expected_kind)
      throw DataError("artifact kind '" + head[1] + "' where '" + expected_kind + "' expected");
    TextDoc doc(head[1]);
    while (std::getline(in, line)) {
      if (trim(line).empty()) continue;
      auto sp = line.find(' ');
      if (sp == std::string::npos) {
        doc.add(line, "");
      } else {
        doc.add(line.substr(0, sp), line.substr(sp + 1));
      }
    }
    return doc;
  }

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write " + path);
    out << str();
  }

  static TextDoc load(const std::string& path, const std::string& expected_kind) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str(), expected_kind);
  }

 private:
  void add(const std::string& key, std::string value) {
    if (key.empty() || key.find_first_of(" \t\n") != std::string::npos)
      throw Error("invalid artifact key '" + key + "'");
    if (index_.count(key)) throw DataError(kind_ + ": duplicate key '" + key + "'");
    index_[key] = entries_.size();
    entries_.emplace_back(key, std::move(value));
  }

  static std::vector<std::string> tokens(const std::string& s) {
    std::vector<std::string> out;
    std::istringstream in(s);
    std::string t;
    while (in >> t) out.push_back(t);
    return out;
  }

  std::string kind_;
  std::vector<std::pair<std::string, std::string>> entries_;
  std::map<std::string, std::size_t> index_;
};

}  // namespace astc

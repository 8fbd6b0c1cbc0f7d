#pragma once

#include <string>
#include <unordered_map>
#include <vector>

namespace cer {

// Token/id map with fixed specials, frequency-ranked real words in [4, V),
// and a reserved made-up id range [V, V+M) carrying no surface forms.
class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kUnk = 3;
  static constexpr int kSpecialCount = 4;

  // Ranks tokens by frequency (ties lexicographic) and keeps at most
  // max_size - 4 of them. Throws on an empty corpus or max_size < 5.
  static Vocabulary build(const std::vector<std::string>& lines, int max_size, int madeup = 10000);

  static Vocabulary load(const std::string& path);
  void save(const std::string& path) const;

  int size() const { return v_; }
  int madeup() const { return m_; }
  int total() const { return v_ + m_; }

  bool is_special(int id) const { return id >= 0 && id < kSpecialCount; }
  bool is_madeup(int id) const { return id >= v_ && id < v_ + m_; }
  bool contains(const std::string& tok) const { return to_id_.count(tok) != 0; }

  int encode_token(const std::string& tok) const;
  std::vector<int> encode(const std::string& line) const;

  // Surface form; made-up ids render as "<mu:k>" for diagnostics only.
  std::string token(int id) const;
  // Joins surface forms, dropping PAD/BOS/EOS (UNK is kept).
  std::string decode(const std::vector<int>& ids) const;

 private:
  Vocabulary() = default;
  void push_token(const std::string& tok);

  std::unordered_map<std::string, int> to_id_;
  std::vector<std::string> to_token_;
  int v_ = 0;
  int m_ = 0;
};

}  // namespace cer

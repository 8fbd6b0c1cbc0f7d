#include "cer/vocab.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <stdexcept>

#include "cer/text.hpp"

namespace cer {

namespace {
const char* kSpecialForms[] = {"<pad>", "<bos>", "<eos>", "<unk>"};
}

void Vocabulary::push_token(const std::string& tok) {
  to_id_.emplace(tok, static_cast<int>(to_token_.size()));
  to_token_.push_back(tok);
}

Vocabulary Vocabulary::build(const std::vector<std::string>& lines, int max_size, int madeup) {
  if (max_size < kSpecialCount + 1)
    throw std::invalid_argument("vocab: max_size must be at least 5");
  if (madeup < 0) throw std::invalid_argument("vocab: made-up count must be >= 0");

  std::map<std::string, long long> freq;
  for (const std::string& line : lines)
    for (const std::string& tok : split_ws(line)) ++freq[tok];
  for (const char* form : kSpecialForms) freq.erase(form);
  if (freq.empty()) throw std::invalid_argument("vocab: empty corpus");

  std::vector<std::pair<std::string, long long>> ranked(freq.begin(), freq.end());
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });

  Vocabulary v;
  for (const char* form : kSpecialForms) v.push_token(form);
  const std::size_t keep =
      std::min(ranked.size(), static_cast<std::size_t>(max_size - kSpecialCount));
  for (std::size_t i = 0; i < keep; ++i) v.push_token(ranked[i].first);
  v.v_ = static_cast<int>(v.to_token_.size());
  v.m_ = madeup;
  return v;
}

int Vocabulary::encode_token(const std::string& tok) const {
  auto it = to_id_.find(tok);
  return it == to_id_.end() ? kUnk : it->second;
}

std::vector<int> Vocabulary::encode(const std::string& line) const {
  std::vector<int> ids;
  for (const std::string& tok : split_ws(line)) ids.push_back(encode_token(tok));
  return ids;
}

std::string Vocabulary::token(int id) const {
  if (id >= 0 && id < v_) return to_token_[static_cast<std::size_t>(id)];
  if (is_madeup(id)) return "<mu:" + std::to_string(id - v_) + ">";
  throw std::out_of_range("vocab: id " + std::to_string(id) + " outside [0," +
                          std::to_string(total()) + ")");
}

std::string Vocabulary::decode(const std::vector<int>& ids) const {
  std::vector<std::string> toks;
  for (int id : ids) {
    if (id == kPad || id == kBos || id == kEos) continue;
    toks.push_back(token(id));
  }
  return join_ws(toks);
}

void Vocabulary::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("vocab: cannot write " + path);
  out << "#V=" << v_ << " M=" << m_ << "\n";
  for (int id = 0; id < v_; ++id) out << to_token_[static_cast<std::size_t>(id)] << '\t' << id << '\n';
  if (!out) throw std::runtime_error("vocab: write failed for " + path);
}

Vocabulary Vocabulary::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("vocab: cannot read " + path);
  std::string header;
  std::getline(in, header);
  int v = 0, m = 0;
  if (std::sscanf(header.c_str(), "#V=%d M=%d", &v, &m) != 2)
    throw std::runtime_error("vocab: bad header in " + path);

  Vocabulary out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw std::runtime_error("vocab: bad line in " + path);
    const std::string tok = line.substr(0, tab);
    const int id = std::stoi(line.substr(tab + 1));
    if (id != static_cast<int>(out.to_token_.size()))
      throw std::runtime_error("vocab: non-contiguous ids in " + path);
    out.push_token(tok);
  }
  if (static_cast<int>(out.to_token_.size()) != v)
    throw std::runtime_error("vocab: header V does not match entry count in " + path);
  for (int i = 0; i < kSpecialCount; ++i)
    if (out.to_token_[static_cast<std::size_t>(i)] != kSpecialForms[i])
      throw std::runtime_error("vocab: specials malformed in " + path);
  out.v_ = v;
  out.m_ = m;
  return out;
}

}  // namespace cer

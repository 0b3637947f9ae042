// SPDX-License-Identifier: Apache-2.0

#include "scope/model_io.hpp"

#include <bit>
#include <cstring>
#include <sstream>

#include "scope/fileutil.hpp"
#include "scope/hash.hpp"

namespace scope {

namespace {

constexpr char kMagic[8] = {'S', 'C', 'O', 'P', 'E', 'M', 'D', 'L'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}
  std::uint64_t u(int width) {
    need(static_cast<std::size_t>(width));
    std::uint64_t v = 0;
    for (int i = 0; i < width; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + static_cast<std::size_t>(i)])) << (8 * i);
    pos_ += static_cast<std::size_t>(width);
    return v;
  }
  std::string take(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw ModelFormatError("model file truncated");
  }
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

int to_int(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    const int v = std::stoi(value, &used);
    if (used != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw ModelFormatError("bad header value for " + key + ": '" + value + "'");
  }
}

}  // namespace

std::string serialize_model(const ModelParams& params) {
  std::string out(kMagic, sizeof kMagic);
  put_u32(out, kVersion);
  put_u64(out, params.model_id());
  const std::string header = params.header_text();
  put_u32(out, static_cast<std::uint32_t>(header.size()));
  out += header;
  std::size_t count = 0;
  const auto layout = ModelParams::layout(params.hyper(), params.vocab().size());
  for (const auto& [name, shape] : layout) count += shape_size(shape);
  put_u64(out, count);
  for (const auto& [name, shape] : layout) {
    for (double v : params.weight(name).data()) put_u64(out, std::bit_cast<std::uint64_t>(v));
  }
  return out;
}

ModelParams parse_model(const std::string& bytes) {
  Reader r(bytes);
  if (r.take(sizeof kMagic) != std::string(kMagic, sizeof kMagic)) throw ModelFormatError("not a model file");
  if (r.u(4) != kVersion) throw ModelFormatError("unsupported model file version");
  const std::uint64_t stored_id = r.u(8);
  const std::string header = r.take(static_cast<std::size_t>(r.u(4)));

  Hyperparams hp;
  std::vector<std::string> tokens;
  SpecialTokens special;
  bool have_vocab = false, have_special = false;
  std::istringstream lines(header);
  std::string line;
  while (std::getline(lines, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ModelFormatError("malformed header line");
    const std::string key = line.substr(0, eq), value = line.substr(eq + 1);
    if (key == "kind") {
      try {
        hp.kind = parse_model_kind(value);
      } catch (const std::invalid_argument&) {
        throw ModelFormatError("unknown model kind in header");
      }
    } else if (key == "layers") hp.layers = to_int(key, value);
    else if (key == "heads") hp.heads = to_int(key, value);
    else if (key == "width") hp.width = to_int(key, value);
    else if (key == "context") hp.context = to_int(key, value);
    else if (key == "ff_width") hp.ff_width = to_int(key, value);
    else if (key == "num_classes") hp.num_classes = to_int(key, value);
    else if (key == "vocab") {
      std::istringstream ts(value);
      std::string t;
      while (ts >> t) tokens.push_back(t);
      have_vocab = true;
    } else if (key == "special") {
      int ids[4];
      if (std::sscanf(value.c_str(), "%d,%d,%d,%d", &ids[0], &ids[1], &ids[2], &ids[3]) != 4) {
        throw ModelFormatError("malformed special token line");
      }
      special = {ids[0], ids[1], ids[2], ids[3]};
      have_special = true;
    } else if (key != "weight") {
      throw ModelFormatError("unknown header key '" + key + "'");
    }
  }
  if (!have_vocab || !have_special) throw ModelFormatError("header lacks vocab");

  try {
    hp.validate();
    if (hp.width > 4096 || hp.context > 4096 || hp.layers > 64 || hp.ff_width > 16384 || tokens.size() > 65536) {
      throw ModelFormatError("implausible model dimensions");
    }
    Vocab vocab(tokens, special);
    const auto layout = ModelParams::layout(hp, vocab.size());
    std::size_t expected = 0;
    for (const auto& [name, shape] : layout) expected += shape_size(shape);
    if (r.u(8) != expected) throw ModelFormatError("weight count does not match header");
    ModelParams::Weights weights;
    for (const auto& [name, shape] : layout) {
      std::vector<double> data(shape_size(shape));
      for (double& v : data) v = std::bit_cast<double>(r.u(8));
      weights.emplace(name, std::make_shared<const Tensor>(shape, std::move(data)));
    }
    if (!r.done()) throw ModelFormatError("trailing bytes after weights");
    ModelParams params(hp, std::move(vocab), std::move(weights));
    if (params.header_text() != header) throw ModelFormatError("header is not canonical");
    if (params.model_id() != stored_id) {
      throw ModelFormatError("model id mismatch: header says " + hex64(stored_id) + ", content hashes to " +
                             hex64(params.model_id()));
    }
    return params;
  } catch (const ModelFormatError&) {
    throw;
  } catch (const std::exception& e) {
    throw ModelFormatError(std::string("invalid model: ") + e.what());
  }
}

void save_model(const std::filesystem::path& path, const ModelParams& params) {
  write_file_atomic(path, serialize_model(params));
}

ModelParams load_model(const std::filesystem::path& path) { return parse_model(read_file(path)); }

}  // namespace scope

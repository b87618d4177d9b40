#include "faultline/activation_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

#include <json.hpp>

#include "faultline/error.hpp"

namespace faultline {

using nlohmann::json;

void append_f32_le(std::vector<std::uint8_t>& out, float value) {
  const auto bits = std::bit_cast<std::uint32_t>(value);
  for (int b = 0; b < 4; ++b) out.push_back(static_cast<std::uint8_t>((bits >> (8 * b)) & 0xFFu));
}

float read_f32_le(const std::uint8_t* bytes) {
  std::uint32_t bits = 0;
  for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(bytes[b]) << (8 * b);
  return std::bit_cast<float>(bits);
}

void append_u64_le(std::vector<std::uint8_t>& out, std::uint64_t value) {
  for (int b = 0; b < 8; ++b) out.push_back(static_cast<std::uint8_t>((value >> (8 * b)) & 0xFFu));
}

std::uint64_t read_u64_le(const std::uint8_t* bytes) {
  std::uint64_t v = 0;
  for (int b = 0; b < 8; ++b) v |= static_cast<std::uint64_t>(bytes[b]) << (8 * b);
  return v;
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIo, "cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw Error(ErrorCode::kIo, "write failed for '" + path.string() + "'");
}

void write_activation_set(const LabeledActivationSet& set, std::ostream& out) {
  const std::size_t block = set.maps() * set.height() * set.width() * sizeof(float);
  json manifest;
  manifest["classes"] = set.classes();
  manifest["m"] = set.maps();
  manifest["u"] = set.height();
  manifest["v"] = set.width();
  manifest["items"] = json::array();
  std::size_t offset = 0;
  for (const auto& item : set.items()) {
    manifest["items"].push_back({{"id", item.image_id}, {"class", item.true_class}, {"offset", offset}});
    offset += block;
  }
  const std::string text = manifest.dump();

  std::vector<std::uint8_t> bytes;
  bytes.reserve(16 + text.size() + offset);
  bytes.insert(bytes.end(), std::begin(kActivationMagic), std::end(kActivationMagic));
  append_u64_le(bytes, text.size());
  bytes.insert(bytes.end(), text.begin(), text.end());
  for (const auto& item : set.items()) {
    for (double x : item.activation.values()) append_f32_le(bytes, static_cast<float>(x));
  }
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

LabeledActivationSet read_activation_set(std::istream& in) {
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kActivationMagic, 8) != 0) {
    throw Error(ErrorCode::kMalformedHeader, "missing FLXACT01 magic");
  }
  const std::uint64_t len = read_u64_le(bytes.data() + 8);
  if (len > bytes.size() - 16) throw Error(ErrorCode::kMalformedHeader, "manifest length exceeds file size");

  json manifest;
  try {
    manifest = json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(len));
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kMalformedHeader, std::string("manifest is not valid JSON: ") + e.what());
  }

  std::vector<std::string> classes;
  std::size_t m = 0, u = 0, v = 0;
  try {
    classes = manifest.at("classes").get<std::vector<std::string>>();
    m = manifest.at("m").get<std::size_t>();
    u = manifest.at("u").get<std::size_t>();
    v = manifest.at("v").get<std::size_t>();
    if (!manifest.at("items").is_array()) throw Error(ErrorCode::kMalformedHeader, "items must be an array");
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kMalformedHeader, std::string("manifest field error: ") + e.what());
  }
  if (m == 0 || u == 0 || v == 0) throw Error(ErrorCode::kMalformedHeader, "m, u, v must be positive");

  LabeledActivationSet set(classes, m, u, v);
  const std::size_t count = m * u * v;
  const std::size_t payload_start = 16 + len;
  const std::size_t payload_size = bytes.size() - payload_start;
  for (const auto& entry : manifest["items"]) {
    std::string id, label;
    std::size_t offset = 0;
    try {
      id = entry.at("id").get<std::string>();
      label = entry.at("class").get<std::string>();
      offset = entry.at("offset").get<std::size_t>();
    } catch (const json::exception& e) {
      throw Error(ErrorCode::kMalformedHeader, std::string("item field error: ") + e.what());
    }
    if (offset > payload_size || payload_size - offset < count * sizeof(float)) {
      throw Error(ErrorCode::kTruncatedPayload, "payload truncated for item '" + id + "'");
    }
    std::vector<double> values(count);
    const std::uint8_t* p = bytes.data() + payload_start + offset;
    for (std::size_t i = 0; i < count; ++i) values[i] = read_f32_le(p + 4 * i);
    set.add({id, ActivationTensor(m, u, v, std::move(values)), label});
  }
  return set;
}

void save_activation_set(const LabeledActivationSet& set, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIo, "cannot write '" + path.string() + "'");
  write_activation_set(set, out);
}

LabeledActivationSet load_activation_set(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot open '" + path.string() + "'");
  return read_activation_set(in);
}

void save_head(const ClassifierHead& head, const std::filesystem::path& path) {
  json j;
  j["weights"] = head.weights();
  j["bias"] = head.bias();
  j["classes"] = head.labels();
  write_text_file(path, j.dump(2) + "\n");
}

ClassifierHead load_head(const std::filesystem::path& path) {
  try {
    const json j = json::parse(read_text_file(path));
    return ClassifierHead(j.at("weights").get<std::vector<Vector>>(), j.at("bias").get<Vector>(),
                          j.at("classes").get<std::vector<std::string>>());
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kMalformedHeader, "bad head file '" + path.string() + "': " + e.what());
  }
}

}  // namespace faultline

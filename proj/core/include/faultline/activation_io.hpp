#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "faultline/model.hpp"

namespace faultline {

// Binary activation-set file:
//   "FLXACT01"                      8-byte magic
//   uint64 LE                       manifest byte length
//   UTF-8 JSON manifest             {classes, m, u, v, items:[{id, class, offset}]}
//   float32 LE payload              one m*u*v block per item, row-major [map][row][col]
// `offset` is the byte offset of an item's block from the start of the payload.
inline constexpr char kActivationMagic[8] = {'F', 'L', 'X', 'A', 'C', 'T', '0', '1'};

void save_activation_set(const LabeledActivationSet& set, const std::filesystem::path& path);
LabeledActivationSet load_activation_set(const std::filesystem::path& path);

void write_activation_set(const LabeledActivationSet& set, std::ostream& out);
LabeledActivationSet read_activation_set(std::istream& in);

// Sidecar head file: {"weights": [[...]], "bias": [...], "classes": [...]}.
void save_head(const ClassifierHead& head, const std::filesystem::path& path);
ClassifierHead load_head(const std::filesystem::path& path);

// Little-endian float32 helpers shared with the policy checkpoint format.
void append_f32_le(std::vector<std::uint8_t>& out, float value);
float read_f32_le(const std::uint8_t* bytes);
void append_u64_le(std::vector<std::uint8_t>& out, std::uint64_t value);
std::uint64_t read_u64_le(const std::uint8_t* bytes);

std::string read_text_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, const std::string& text);

}  // namespace faultline

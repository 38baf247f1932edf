#include "modalpatch/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

static_assert(std::endian::native == std::endian::little,
              "checkpoint payload assumes a little-endian host");

namespace modalpatch {

using nlohmann::json;

void save_checkpoint(const ad::Bindings& params, const std::string& prefix) {
  std::filesystem::path p(prefix);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());

  json header;
  header["params"] = json::array();
  std::ofstream bin(prefix + ".bin", std::ios::binary | std::ios::trunc);
  if (!bin) throw std::runtime_error("checkpoint: cannot write " + prefix + ".bin");

  uint64_t offset = 0;
  for (const auto& [name, arr] : params) {  // std::map: name order
    json entry;
    entry["name"] = name;
    entry["shape"] = arr.shape;
    entry["offset"] = offset;
    header["params"].push_back(entry);
    bin.write(reinterpret_cast<const char*>(arr.data.data()),
              static_cast<std::streamsize>(arr.data.size() * sizeof(double)));
    offset += arr.data.size() * sizeof(double);
  }
  bin.close();

  std::ofstream hdr(prefix + ".json", std::ios::trunc);
  if (!hdr) throw std::runtime_error("checkpoint: cannot write " + prefix + ".json");
  hdr << header.dump(2) << "\n";
}

ad::Bindings load_checkpoint(const std::string& prefix) {
  std::ifstream hdr(prefix + ".json");
  if (!hdr) throw std::runtime_error("checkpoint: missing " + prefix + ".json");
  json header = json::parse(hdr);

  std::ifstream bin(prefix + ".bin", std::ios::binary);
  if (!bin) throw std::runtime_error("checkpoint: missing " + prefix + ".bin");

  ad::Bindings params;
  for (const auto& entry : header.at("params")) {
    const std::string name = entry.at("name").get<std::string>();
    const std::vector<int> shape = entry.at("shape").get<std::vector<int>>();
    const uint64_t offset = entry.at("offset").get<uint64_t>();
    Array arr(shape);
    arr.requires_grad = true;
    bin.seekg(static_cast<std::streamoff>(offset));
    bin.read(reinterpret_cast<char*>(arr.data.data()),
             static_cast<std::streamsize>(arr.data.size() * sizeof(double)));
    if (!bin) throw std::runtime_error("checkpoint: truncated payload for '" + name + "'");
    params[name] = std::move(arr);
  }
  return params;
}

bool checkpoint_exists(const std::string& prefix) {
  return std::filesystem::exists(prefix + ".json") &&
         std::filesystem::exists(prefix + ".bin");
}

uint64_t file_hash(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("file_hash: cannot open " + path);
  uint64_t h = 0xcbf29ce484222325ULL;
  char buf[65536];
  while (f) {
    f.read(buf, sizeof(buf));
    const std::streamsize got = f.gcount();
    for (std::streamsize i = 0; i < got; ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

std::string hash_hex(uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return std::string(buf);
}

}  // namespace modalpatch

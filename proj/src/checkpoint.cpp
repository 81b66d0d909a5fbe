#include "madt/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include <json.hpp>

#include "madt/errors.hpp"

namespace madt {

using nlohmann::json;

void write_checkpoint(const std::string& path,
                      const std::map<std::string, std::string>& header_fields,
                      const std::vector<NamedTensor>& params) {
  json header;
  header["schema"] = 1;
  for (const auto& [k, v] : header_fields) header["config"][k] = v;
  header["params"] = json::array();
  for (const auto& p : params) {
    header["params"].push_back({{"name", p.name}, {"shape", p.tensor.shape()}});
  }
  const std::string hs = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open checkpoint for writing: " + path);
  out.write(kCheckpointMagic, static_cast<std::streamsize>(std::strlen(kCheckpointMagic)));
  const uint32_t hlen = static_cast<uint32_t>(hs.size());
  out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
  out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  for (const auto& p : params) {
    out.write(reinterpret_cast<const char*>(p.tensor.data().data()),
              static_cast<std::streamsize>(p.tensor.data().size() * sizeof(double)));
  }
  if (!out) throw DataError("write failed for checkpoint: " + path);
}

const Tensor* LoadedCheckpoint::find(const std::string& name) const {
  for (const auto& p : params)
    if (p.name == name) return &p.tensor;
  return nullptr;
}

LoadedCheckpoint read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint: " + path);
  std::string magic(std::strlen(kCheckpointMagic), '\0');
  in.read(magic.data(), static_cast<std::streamsize>(magic.size()));
  if (!in || magic != kCheckpointMagic) {
    throw DataError("bad checkpoint magic in " + path);
  }
  uint32_t hlen = 0;
  in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
  std::string hs(hlen, '\0');
  in.read(hs.data(), static_cast<std::streamsize>(hlen));
  if (!in) throw DataError("truncated checkpoint header in " + path);

  json header;
  try {
    header = json::parse(hs);
  } catch (const json::exception& e) {
    throw DataError("unparsable checkpoint header in " + path + ": " + e.what());
  }

  LoadedCheckpoint ck;
  if (header.contains("config")) {
    for (auto it = header["config"].begin(); it != header["config"].end(); ++it) {
      ck.header_fields[it.key()] = it.value().get<std::string>();
    }
  }
  for (const auto& entry : header["params"]) {
    NamedTensor nt;
    nt.name = entry["name"].get<std::string>();
    std::vector<int> shape = entry["shape"].get<std::vector<int>>();
    int64_t numel = 1;
    for (int e : shape) numel *= e;
    std::vector<double> data(static_cast<size_t>(numel));
    in.read(reinterpret_cast<char*>(data.data()),
            static_cast<std::streamsize>(data.size() * sizeof(double)));
    if (!in) throw DataError("truncated parameter section '" + nt.name + "' in " + path);
    nt.tensor = Tensor::from_data(std::move(shape), std::move(data), false);
    ck.params.push_back(std::move(nt));
  }
  return ck;
}

uint64_t file_content_hash(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot hash missing file: " + path);
  uint64_t h = 14695981039346656037ull;
  char buf[4096];
  while (in.read(buf, sizeof(buf)) || in.gcount() > 0) {
    for (std::streamsize i = 0; i < in.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 1099511628211ull;
    }
    if (!in) break;
  }
  return h;
}

}  // namespace madt

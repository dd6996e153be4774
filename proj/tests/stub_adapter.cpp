// Stand-in for a trained model behind the exec adapter protocol.
//
//   stub_adapter <source.jsonl> <manifest.json> <output.jsonl>
//
// Copies every line of the source file whose image_id appears in the
// manifest to the output file, byte for byte.

#include <fstream>
#include <iostream>
#include <set>
#include <sstream>
#include <string>

#include <json.hpp>

int main(int argc, char** argv) {
  if (argc != 4) {
    std::cerr << "usage: stub_adapter <source.jsonl> <manifest.json> <output.jsonl>\n";
    return 64;
  }
  std::ifstream manifest_in(argv[2]);
  if (!manifest_in) {
    std::cerr << "stub_adapter: cannot read manifest " << argv[2] << "\n";
    return 66;
  }
  std::set<long long> ids;
  for (const auto& im : nlohmann::json::parse(manifest_in)) ids.insert(im.at("id").get<long long>());

  std::ifstream source(argv[1]);
  if (!source) {
    std::cerr << "stub_adapter: cannot read source " << argv[1] << "\n";
    return 66;
  }
  std::ofstream out(argv[3], std::ios::binary);
  std::string line;
  while (std::getline(source, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    if (ids.count(nlohmann::json::parse(line).at("image_id").get<long long>())) out << line << "\n";
  }
  return out ? 0 : 74;
}

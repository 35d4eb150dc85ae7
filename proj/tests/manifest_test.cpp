#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "dctnn/manifest.hpp"

using namespace dctnn;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const auto d = fs::temp_directory_path() / name;
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

void write(const fs::path& p, const std::string& s) {
  fs::create_directories(p.parent_path());
  std::ofstream(p, std::ios::binary) << s;
}

}  // namespace

TEST(Sha256, KnownDigests) {
  const auto d = scratch("dctnn_sha");
  write(d / "abc", "abc");
  write(d / "empty", "");
  EXPECT_EQ(sha256_file(d / "abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  EXPECT_EQ(sha256_file(d / "empty"),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  EXPECT_THROW(sha256_file(d / "missing"), DataError);
  fs::remove_all(d);
}

TEST(HashTree, RecursiveAndSkipsManifest) {
  const auto d = scratch("dctnn_tree");
  write(d / "a.txt", "abc");
  write(d / "sub" / "b.txt", "x");
  write(d / kManifestName, "{}");
  const auto h = hash_tree(d);
  ASSERT_EQ(h.size(), 2u);
  EXPECT_TRUE(h.count("a.txt"));
  EXPECT_TRUE(h.count("sub/b.txt"));
  fs::remove_all(d);
}

TEST(Manifest, WriteAndRead) {
  const auto d = scratch("dctnn_manifest");
  write(d / "out.csv", "1,2\n");
  RunManifest m;
  m.subcommand = "fit";
  m.seed = 9;
  m.config = {{"lr", 0.001}};
  m.started_at = utc_now();
  write_manifest(d, m);
  const auto j = read_manifest(d);
  EXPECT_EQ(j["subcommand"], "fit");
  EXPECT_EQ(j["seed"], 9);
  EXPECT_EQ(j["artifacts"].size(), 1u);
  EXPECT_EQ(j["artifacts"]["out.csv"], sha256_file(d / "out.csv"));
  EXPECT_EQ(j["versions"]["dctnn"], kVersion);
  EXPECT_EQ(j["started_at"].get<std::string>().size(), 20u);
  // Rewriting leaves the artifact set unchanged.
  write_manifest(d, m);
  EXPECT_EQ(read_manifest(d)["artifacts"], j["artifacts"]);
  fs::remove_all(d);
  EXPECT_THROW(read_manifest(d), DataError);
}

#include <doctest.h>

#include <cstring>
#include <fstream>
#include <numeric>
#include <set>

#include <Eigen/QR>
#include <nlohmann/json.hpp>

#include "aquant/model_io.hpp"

using namespace aquant;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("aquant_io_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::vector<std::uint8_t> read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

void write_bytes(const fs::path& p, const std::vector<std::uint8_t>& b) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

nlohmann::json read_json(const fs::path& p) {
  std::ifstream in(p);
  return nlohmann::json::parse(in);
}

void write_json(const fs::path& p, const nlohmann::json& j) {
  std::ofstream out(p, std::ios::trunc);
  out << j.dump(2);
}

ModelGraph trained_like(std::uint64_t seed) {
  ModelGraph m = make_toy_cnn(1, 12, 12, 5);
  Rng rng(seed);
  init_params(m, rng);
  for (auto& [k, t] : m.params)
    for (auto& v : t.data()) v = static_cast<float>(v + 0.01 * rng.normal());
  return m;
}

void put_u32be(std::vector<std::uint8_t>& b, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) b.push_back(static_cast<std::uint8_t>(v >> s));
}

}  // namespace

TEST_CASE("tensor blob encoding") {
  Rng rng(1);
  const Tensorf t = rng_normal(rng, 0, 1, Shape{3, 4, 5});
  const auto bytes = encode_tensor(t);
  CHECK(bytes.size() == 5 + 2 + 3 * 4 + 60 * 4 + 4);
  CHECK(decode_tensor(bytes) == t);

  auto bad = bytes;
  bad[20] ^= 0x40;
  CHECK_THROWS_AS(decode_tensor(bad), ChecksumError);
  auto magic = bytes;
  magic[0] = 'X';
  CHECK_THROWS_AS(decode_tensor(magic), FormatError);
  CHECK_THROWS_AS(decode_tensor(std::vector<std::uint8_t>(bytes.begin(), bytes.begin() + 30)), FormatError);
  CHECK_THROWS_AS(decode_tensor({}), FormatError);

  const char* check = "123456789";
  CHECK(crc32_of(check, 9) == 0xCBF43926u);
}

TEST_CASE("model round trip") {
  const fs::path dir = scratch("roundtrip");
  ModelGraph m = trained_like(2);
  m.quant.rounder = "attention";
  m.quant.bit_assignment = {{"conv1", 8}, {"conv2", 4}, {"fc1", 4}, {"fc2", 8}};
  m.quant.weights["conv2"] = QuantSpec::make(4, 0.0123, true, 0.5 * 0.0123);
  m.quant.activations["relu2"] = QuantSpec::make(8, 0.05, false);
  m.quant.alpha_crc32["conv2"] = 0xDEADBEEFu;
  save_model(m, dir);
  const ModelGraph back = load_model(dir);
  CHECK(back == m);
  for (const auto& [k, t] : m.params) CHECK(std::memcmp(back.param(k).data().data(), t.data().data(), t.size() * sizeof(float)) == 0);

  save_model(back, dir / "again");
  CHECK(read_bytes(dir / "manifest.json") == read_bytes(dir / "again" / "manifest.json"));
  CHECK(read_json(dir / "manifest.json").at("preprocessing").at("pixel_scale") == "1/255");
}

TEST_CASE("model load errors") {
  const fs::path dir = scratch("errors");
  const ModelGraph m = trained_like(3);

  SUBCASE("corrupt blob byte") {
    save_model(m, dir);
    const fs::path blob = dir / "tensors" / "conv2.weight.qtns";
    auto b = read_bytes(blob);
    b[b.size() / 2] ^= 0x01;
    write_bytes(blob, b);
    try {
      load_model(dir);
      CHECK(false);
    } catch (const ChecksumError& e) {
      CHECK(std::string(e.what()).find("conv2.weight") != std::string::npos);
    }
  }
  SUBCASE("missing blob") {
    save_model(m, dir);
    fs::remove(dir / "tensors" / "fc1.bias.qtns");
    CHECK_THROWS_AS(load_model(dir), MissingBlobError);
  }
  SUBCASE("truncated blob") {
    save_model(m, dir);
    const fs::path blob = dir / "tensors" / "fc2.weight.qtns";
    auto b = read_bytes(blob);
    b.resize(b.size() - 9);
    write_bytes(blob, b);
    CHECK_THROWS_AS(load_model(dir), FormatError);
  }
  SUBCASE("version mismatch") {
    save_model(m, dir);
    auto j = read_json(dir / "manifest.json");
    j["version"] = kManifestVersion + 1;
    write_json(dir / "manifest.json", j);
    CHECK_THROWS_AS(load_model(dir), FormatError);
  }
  SUBCASE("unknown field") {
    save_model(m, dir);
    auto j = read_json(dir / "manifest.json");
    j["layers"][0]["dilation"] = 2;
    write_json(dir / "manifest.json", j);
    CHECK_THROWS_AS(load_model(dir), FormatError);
  }
  SUBCASE("manifest checksum disagrees with blob") {
    save_model(m, dir);
    auto j = read_json(dir / "manifest.json");
    j["tensors"]["fc1.weight"]["crc32"] = 12345;
    write_json(dir / "manifest.json", j);
    CHECK_THROWS_AS(load_model(dir), ChecksumError);
  }
  SUBCASE("garbage manifest") {
    fs::create_directories(dir);
    std::ofstream(dir / "manifest.json") << "{ not json";
    CHECK_THROWS_AS(load_model(dir), FormatError);
  }
  SUBCASE("no manifest") { CHECK_THROWS(load_model(dir / "nowhere")); }
}

TEST_CASE("IDX reading") {
  const fs::path dir = scratch("idx");
  std::vector<std::uint8_t> img, lab;
  put_u32be(img, 0x803);
  put_u32be(img, 2);
  put_u32be(img, 2);
  put_u32be(img, 3);
  for (int i = 0; i < 12; ++i) img.push_back(i == 0 ? 255 : static_cast<std::uint8_t>(i * 20));
  put_u32be(lab, 0x801);
  put_u32be(lab, 2);
  lab.push_back(4);
  lab.push_back(1);
  write_bytes(dir / "img", img);
  write_bytes(dir / "lab", lab);
  const Dataset ds = load_idx(dir / "img", dir / "lab");
  CHECK(ds.images.shape() == Shape{2, 1, 2, 3});
  CHECK(ds.images[0] == 1.0f);
  CHECK(ds.images[1] == 20.0f / 255.0f);
  CHECK(ds.labels == std::vector<int>{4, 1});
  CHECK(ds.classes == 5);

  save_idx(ds, dir / "img2.gz", dir / "lab2.gz");
  const Dataset again = load_idx(dir / "img2.gz", dir / "lab2.gz");
  CHECK(again.images == ds.images);
  CHECK(again.labels == ds.labels);

  auto short_lab = lab;
  short_lab[7] = 1;
  short_lab.pop_back();
  write_bytes(dir / "lab_short", short_lab);
  CHECK_THROWS_AS(load_idx(dir / "img", dir / "lab_short"), FormatError);

  auto bad_magic = img;
  bad_magic[3] = 0x04;
  write_bytes(dir / "img_bad", bad_magic);
  CHECK_THROWS_AS(load_idx(dir / "img_bad", dir / "lab"), FormatError);

  auto truncated = img;
  truncated.resize(truncated.size() - 1);
  write_bytes(dir / "img_trunc", truncated);
  CHECK_THROWS_AS(load_idx(dir / "img_trunc", dir / "lab"), FormatError);
  CHECK_THROWS(load_idx(dir / "absent", dir / "lab"));
}

TEST_CASE("bundled MNIST subset headers") {
  const fs::path data = AQUANT_DATA_DIR;
  const Dataset test = load_idx(data / "mnist-test-images-idx3-ubyte.gz", data / "mnist-test-labels-idx1-ubyte.gz");
  CHECK(test.size() == 2000);
  CHECK(test.sample_shape() == Shape{1, 28, 28});
  CHECK(test.classes == 10);
  CHECK(test.images.flat().minCoeff() >= 0.0f);
  CHECK(test.images.flat().maxCoeff() == 1.0f);
  const Dataset train =
      load_idx(data / "mnist-train-images-idx3-ubyte.gz", data / "mnist-train-labels-idx1-ubyte.gz");
  CHECK(train.size() == 8000);
}

TEST_CASE("synthetic dataset") {
  Rng a(5), b(5);
  const Dataset ds = synth_dataset(a, 200, 2);
  CHECK(ds.images.shape() == Shape{200, 1, 8, 8});
  CHECK(ds.classes == 2);
  const Dataset same = synth_dataset(b, 200, 2);
  CHECK(ds.images == same.images);
  CHECK(ds.labels == same.labels);

  // Least-squares linear probe on +/-1 targets.
  Eigen::MatrixXd x(200, 65);
  Eigen::VectorXd y(200);
  for (Index i = 0; i < 200; ++i) {
    for (Index j = 0; j < 64; ++j) x(i, j) = ds.images[i * 64 + j];
    x(i, 64) = 1.0;
    y(i) = ds.labels[i] == 1 ? 1.0 : -1.0;
  }
  const Eigen::VectorXd coef = x.colPivHouseholderQr().solve(y);
  const Eigen::VectorXd pred = x * coef;
  int correct = 0;
  for (Index i = 0; i < 200; ++i) correct += (pred(i) > 0) == (ds.labels[i] == 1);
  CHECK(correct >= 198);

  Rng c(6);
  const Dataset empty = synth_dataset(c, 0, 3);
  CHECK(empty.size() == 0);
  CHECK(empty.images.empty());
  CHECK_THROWS_AS(synth_dataset(c, 10, 0), ConfigError);
}

TEST_CASE("take_calibration") {
  Rng r(7);
  Dataset ds = synth_dataset(r, 300, 4);
  for (Index i = 0; i < ds.size(); ++i) ds.images[i * 64] = static_cast<float>(i);

  auto ids = [](const Dataset& d) {
    std::vector<int> v;
    for (Index i = 0; i < d.size(); ++i) v.push_back(static_cast<int>(d.images[i * 64]));
    return v;
  };
  Rng r1(8), r2(8);
  const Dataset all = take_calibration(ds, 300, r1);
  std::vector<int> perm = ids(all);
  std::sort(perm.begin(), perm.end());
  std::vector<int> expected(300);
  std::iota(expected.begin(), expected.end(), 0);
  CHECK(perm == expected);
  for (Index i = 0; i < all.size(); ++i) CHECK(all.labels[i] == ds.labels[ids(all)[i]]);

  const Dataset sub = take_calibration(ds, 128, r2);
  const auto sub_ids = ids(sub);
  CHECK(std::set<int>(sub_ids.begin(), sub_ids.end()).size() == 128);
  Rng r5(9), r6(9);
  CHECK(ids(take_calibration(ds, 128, r5)) == ids(take_calibration(ds, 128, r6)));

  CHECK_THROWS_AS(take_calibration(ds, 301, r1), SizeError);

  Rng big(10);
  const Dataset large = synth_dataset(big, 60000, 10, Shape{1, 2, 2});
  Dataset tagged = large;
  for (Index i = 0; i < tagged.size(); ++i) tagged.images[i * 4] = static_cast<float>(i);
  const Dataset cal = take_calibration(tagged, 1024, big);
  std::set<float> uniq;
  for (Index i = 0; i < cal.size(); ++i) uniq.insert(cal.images[i * 4]);
  CHECK(uniq.size() == 1024);

  const Dataset mid = dataset_slice(ds, 10, 5);
  CHECK(mid.size() == 5);
  CHECK(ids(mid) == std::vector<int>{10, 11, 12, 13, 14});
}

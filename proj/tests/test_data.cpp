#include "doctest.h"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include "fixtures.hpp"
#include "grad_check.hpp"
#include "rashnet/data.hpp"

using namespace rashnet;
using rashnet::testing::TempDir;

namespace {

DatasetManifest parse(const std::string& text) {
  std::istringstream in(text);
  return parse_manifest(in, "test.csv");
}

std::string error_of(const std::string& text) {
  try {
    parse(text);
  } catch (const DataError& e) {
    return e.what();
  }
  return {};
}

}  // namespace

TEST_CASE("label vocabulary") {
  CHECK(parse_label("measles") == FineLabel::measles);
  CHECK(parse_label("bowens_disease") == FineLabel::bowens_disease);
  CHECK_FALSE(parse_label("smallpox"));
  CHECK_FALSE(parse_label("Measles"));
  for (std::size_t i = 0; i < kFineLabelCount; ++i) {
    const auto l = static_cast<FineLabel>(i);
    CHECK(parse_label(label_name(l)) == l);
    CHECK(binary_label(l) == (l == FineLabel::measles ? 1 : 0));
  }
}

TEST_CASE("manifest parsing") {
  auto m = parse("path,label\na.png,measles\n\"b,c.jpg\",eczema\nd.png , normal_skin\n");
  REQUIRE(m.size() == 3);
  CHECK(m.samples[1].path == "b,c.jpg");
  CHECK(m.samples[2].path == "d.png");
  CHECK(m.positives() == 1);
  CHECK(m.negatives() == 2);
  CHECK(m.samples[2].id == 2);
  CHECK(m.count(FineLabel::eczema) == 1);

  CHECK(error_of("").find("empty manifest") != std::string::npos);
  CHECK(error_of("path,label\n").find("empty manifest") != std::string::npos);
  const auto unknown = error_of("path,label\na.png,smallpox\n");
  CHECK(unknown.find("unknown label 'smallpox'") != std::string::npos);
  CHECK(unknown.find("test.csv:2") != std::string::npos);
  CHECK(error_of("path,label\na.png,measles\na.png,eczema\n").find("duplicate path") != std::string::npos);
  CHECK(error_of("file,label\na.png,measles\n").find("header") != std::string::npos);
  CHECK(error_of("path,label\na.png\n").find("2 fields") != std::string::npos);
  CHECK_THROWS_AS(load_manifest("/nonexistent/manifest.csv"), DataError);
}

TEST_CASE("published corpus manifest round-trips through CSV") {
  auto corpus = rashnet::testing::corpus_manifest();
  std::ostringstream out;
  write_manifest(out, corpus);
  auto back = parse(out.str());
  CHECK(back.size() == 1316);
  CHECK(back.positives() == 158);
  CHECK(back.counts == corpus.counts);
}

TEST_CASE("image codecs") {
  TempDir dir("img");
  Image8 img = Image8::solid(5, 7, 10, 200, 30);
  img.pixels[0] = 255;
  write_png(dir / "a.png", img);
  Image8 back = decode_image(dir / "a.png");
  CHECK(back.height == 5);
  CHECK(back.width == 7);
  CHECK(back.pixels == img.pixels);

  write_jpeg(dir / "b.jpg", Image8::solid(16, 16, 128, 64, 32), 100);
  Image8 jb = decode_image(dir / "b.jpg");
  CHECK(jb.width == 16);
  CHECK(std::abs(int(jb.pixels[0]) - 128) <= 2);

  std::ofstream(dir / "c.gif") << "GIF89a....";
  CHECK_THROWS_AS(decode_image(dir / "c.gif"), DataError);
  std::ofstream(dir / "d.png") << "\x89PNG\r\n\x1a\n garbage";
  CHECK_THROWS_AS(decode_image(dir / "d.png"), DataError);
  CHECK_THROWS_AS(decode_image(dir / "missing.png"), DataError);
}

TEST_CASE("preprocess") {
  SUBCASE("centered constant is zero") {
    PreprocessOptions opt;
    opt.mean = {128.0 / 255.0, 64.0 / 255.0, 32.0 / 255.0};
    Tensor t = preprocess(Image8::solid(37, 53, 128, 64, 32), opt);
    CHECK(t.shape() == Shape{3, 224, 224});
    for (double v : t.to_vector()) CHECK(v == 0.0);
  }
  SUBCASE("resize contract") {
    CHECK(preprocess(Image8::solid(100, 50, 1, 2, 3)).shape() == Shape{3, 224, 224});
  }
  SUBCASE("same size is exact") {
    std::mt19937_64 rng(3);
    Image8 img = Image8::solid(224, 224, 0, 0, 0);
    for (auto& p : img.pixels) p = static_cast<std::uint8_t>(rng() % 256);
    Tensor t = preprocess(img);
    const PreprocessOptions opt;
    for (int c = 0; c < 3; ++c) {
      for (int y = 0; y < 224; y += 17) {
        for (int x = 0; x < 224; x += 13) {
          const double v = img.pixels[static_cast<std::size_t>((y * 224 + x) * 3 + c)] / 255.0;
          const float expect = static_cast<float>((v - opt.mean[c]) / opt.std[c]);
          CHECK(t.get((c * 224 + y) * 224 + x) == expect);
        }
      }
    }
  }
  SUBCASE("deterministic") {
    Image8 img = Image8::solid(31, 45, 9, 99, 199);
    img.pixels[40] = 0;
    CHECK(preprocess(img).bit_equal(preprocess(img)));
  }
  SUBCASE("errors") {
    Image8 empty;
    CHECK_THROWS_AS(preprocess(empty), DataError);
    Image8 gray{4, 4, 1, std::vector<std::uint8_t>(16)};
    CHECK_THROWS_AS(preprocess(gray), DataError);
  }
}

TEST_CASE("augmentation") {
  std::mt19937_64 rng(5);
  Tensor t = rashnet::testing::random_tensor({3, 12, 9}, DType::f32, rng);
  CHECK(hflip(hflip(t)).bit_equal(t));
  CHECK_FALSE(hflip(t).bit_equal(t));
  CHECK(rotate(t, 0.0).bit_equal(t));
  CHECK(hflip(t).get(0) == t.get(8));

  std::mt19937_64 a(42), b(42);
  CHECK(augment(t, a).bit_equal(augment(t, b)));

  SUBCASE("shape and range preserved") {
    double lo = 1e9, hi = -1e9;
    for (double v : t.to_vector()) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    std::mt19937_64 r(8);
    for (int i = 0; i < 50; ++i) {
      Tensor out = augment(t, r);
      CHECK(out.shape() == t.shape());
      for (double v : out.to_vector()) {
        CHECK(v >= lo - 1e-6);
        CHECK(v <= hi + 1e-6);
      }
    }
  }
  SUBCASE("quarter turn of a square moves corners") {
    Tensor sq = Tensor::zeros({1, 3, 3});
    sq.set(0, 1.0);  // top-left
    Tensor r = rotate(sq, 90.0);
    double total = 0;
    for (double v : r.to_vector()) total += v;
    CHECK(total == doctest::Approx(1.0));
    CHECK(r.get(0) < 1e-9);
  }
}

TEST_CASE("oversample") {
  SUBCASE("published class sizes") {
    auto corpus = rashnet::testing::corpus_manifest();
    auto r = oversample(corpus);
    CHECK(r.manifest.negatives() == 1158);
    CHECK(r.manifest.positives() >= 1157);
    CHECK(r.manifest.positives() <= 1158);
    CHECK(r.duplicates == r.manifest.positives() - 158);
    CHECK(r.warnings.empty());
    // Originals retained in order.
    for (std::size_t i = 0; i < corpus.size(); ++i) CHECK(r.manifest.samples[i].id == corpus.samples[i].id);
  }
  SUBCASE("already balanced") {
    DatasetManifest m;
    m.add("a", FineLabel::measles);
    m.add("b", FineLabel::eczema);
    m.add("c", FineLabel::measles);
    auto r = oversample(m);
    CHECK(r.duplicates == 0);
    CHECK(r.manifest.size() == 3);
  }
  SUBCASE("single positive") {
    DatasetManifest m;
    m.add("p", FineLabel::measles);
    for (int i = 0; i < 1158; ++i) m.add("n" + std::to_string(i), FineLabel::scabies);
    auto r = oversample(m);
    CHECK(r.manifest.positives() == 1157);
    REQUIRE(r.warnings.size() == 1);
    CHECK(r.warnings[0].find("1156") != std::string::npos);
  }
  SUBCASE("missing class") {
    DatasetManifest m;
    m.add("n", FineLabel::scabies);
    CHECK_THROWS_AS(oversample(m), DataError);
  }
  SUBCASE("never drops a sample, never changes the negatives") {
    std::mt19937_64 rng(13);
    for (int trial = 0; trial < 50; ++trial) {
      DatasetManifest m;
      const int pos = 1 + static_cast<int>(rng() % 40), neg = 1 + static_cast<int>(rng() % 40);
      for (int i = 0; i < pos; ++i) m.add("p" + std::to_string(i), FineLabel::measles);
      for (int i = 0; i < neg; ++i) m.add("n" + std::to_string(i), FineLabel::psoriasis);
      auto r = oversample(m);
      const auto big = std::max(pos, neg);
      CHECK(std::abs(static_cast<long>(r.manifest.positives()) - static_cast<long>(r.manifest.negatives())) <= 1);
      CHECK(std::max(r.manifest.positives(), r.manifest.negatives()) == static_cast<std::size_t>(big));
      for (std::size_t i = 0; i < m.size(); ++i) CHECK(r.manifest.samples[i].path == m.samples[i].path);
    }
  }
}

TEST_CASE("stratified_kfold") {
  SUBCASE("published class sizes, k=5") {
    auto corpus = rashnet::testing::corpus_manifest();
    auto plan = stratified_kfold(corpus, 5, 7);
    std::vector<std::size_t> pos_counts;
    for (const auto& fold : plan.validation) {
      std::size_t pos = 0;
      for (auto i : fold) pos += corpus.samples[i].positive();
      pos_counts.push_back(pos);
      CHECK((fold.size() == 263 || fold.size() == 264));
    }
    CHECK(std::count(pos_counts.begin(), pos_counts.end(), 32u) == 3);
    CHECK(std::count(pos_counts.begin(), pos_counts.end(), 31u) == 2);
    CHECK(plan.training(0).size() + plan.validation[0].size() == 1316);
  }
  SUBCASE("errors") {
    auto corpus = rashnet::testing::corpus_manifest();
    CHECK_THROWS_AS(stratified_kfold(corpus, 1, 0), DataError);
    CHECK_THROWS_AS(stratified_kfold(std::vector<int>{1, 1, 0, 0, 0, 0}, 3, 0), DataError);
  }
  SUBCASE("seeded") {
    auto corpus = rashnet::testing::corpus_manifest();
    CHECK(stratified_kfold(corpus, 5, 3).fold_of == stratified_kfold(corpus, 5, 3).fold_of);
    CHECK(stratified_kfold(corpus, 5, 3).fold_of != stratified_kfold(corpus, 5, 4).fold_of);
  }
  SUBCASE("fold plan CSV") {
    DatasetManifest m;
    for (int i = 0; i < 4; ++i) m.add("p" + std::to_string(i), FineLabel::measles);
    for (int i = 0; i < 4; ++i) m.add("n" + std::to_string(i), FineLabel::eczema);
    auto plan = stratified_kfold(m, 2, 1);
    std::ostringstream out;
    write_fold_plan(out, plan, m);
    std::istringstream in(out.str());
    std::string line;
    std::getline(in, line);
    CHECK(line == "sample_id,fold");
    int rows = 0;
    while (std::getline(in, line)) ++rows;
    CHECK(rows == 8);
  }
}

TEST_CASE("sources") {
  TempDir dir("src");
  write_png(dir / "a.png", Image8::solid(40, 30, 200, 10, 10));
  write_png(dir / "b.png", Image8::solid(20, 50, 10, 10, 200));
  {
    std::ofstream(dir / "m.csv") << "path,label\na.png,measles\nb.png,eczema\n";
  }
  PreprocessOptions opt;
  opt.size = 32;
  ManifestSource src(load_manifest(dir / "m.csv"), opt);
  CHECK(src.size() == 2);
  CHECK(src.label(0) == 1);
  CHECK(src.label(1) == 0);
  CHECK(src.image(1).shape() == Shape{3, 32, 32});
}

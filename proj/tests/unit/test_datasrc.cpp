// SPDX-License-Identifier: Apache-2.0
#include "doctest.h"

#include <array>
#include <cstdlib>
#include <filesystem>
#include <mutex>
#include <set>
#include <thread>

#include <Eigen/Dense>
#include <httplib.h>
#include <json.hpp>

#include "genq/common/rng.hpp"
#include "genq/datasrc/external.hpp"
#include "genq/datasrc/prompt.hpp"
#include "genq/datasrc/synth.hpp"

using namespace genq;
using data::Dataset;
using nn::TensorF;

namespace {

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("genq_test_" + name)).string();
}

// Straightforward RFC 4648 encoder, kept separate from the library's decoder.
std::string to_base64(const std::string& bytes) {
  static constexpr char table[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
  std::string out;
  std::size_t i = 0;
  for (; i + 3 <= bytes.size(); i += 3) {
    const unsigned v = (static_cast<unsigned char>(bytes[i]) << 16) | (static_cast<unsigned char>(bytes[i + 1]) << 8) |
                       static_cast<unsigned char>(bytes[i + 2]);
    for (int s = 18; s >= 0; s -= 6) out.push_back(table[(v >> s) & 63]);
  }
  if (const std::size_t rest = bytes.size() - i; rest > 0) {
    unsigned v = static_cast<unsigned char>(bytes[i]) << 16;
    if (rest == 2) v |= static_cast<unsigned char>(bytes[i + 1]) << 8;
    out.push_back(table[(v >> 18) & 63]);
    out.push_back(table[(v >> 12) & 63]);
    out.push_back(rest == 2 ? table[(v >> 6) & 63] : '=');
    out.push_back('=');
  }
  return out;
}

std::string le_f32(float v) {
  std::uint32_t u = 0;
  std::memcpy(&u, &v, 4);
  std::string s(4, '\0');
  for (int i = 0; i < 4; ++i) s[i] = static_cast<char>((u >> (8 * i)) & 0xff);
  return s;
}

// Pixel (y, x, c) of the served fixture; multiples of 1/64 keep averages exact.
float fixture_pixel(std::uint64_t seed, int y, int x, int c) {
  return static_cast<float>((y * 7 + x * 3 + c * 11 + static_cast<int>(seed)) % 64) / 64.0F;
}

struct MockServer {
  httplib::Server server;
  std::thread thread;
  int port = 0;
  std::mutex mutex;
  std::vector<nlohmann::json> requests;
  int side = 64;

  MockServer() {
    server.Post("/generate", [this](const httplib::Request& req, httplib::Response& res) {
      const auto body = nlohmann::json::parse(req.body);
      {
        std::lock_guard lock(mutex);
        requests.push_back(body);
      }
      const auto seed = body["seed"].get<std::uint64_t>();
      if (seed == 404) {
        res.status = 500;
        return;
      }
      if (seed == 405) {
        res.set_content(R"({"width": 2, "height": 2, "pixels": "AAAA"})", "application/json");
        return;
      }
      std::string raw;
      for (int y = 0; y < side; ++y)
        for (int x = 0; x < side; ++x)
          for (int c = 0; c < 3; ++c) raw += le_f32(fixture_pixel(seed, y, x, c));
      const nlohmann::json out{{"width", side}, {"height", side}, {"pixels", to_base64(raw)}};
      res.set_content(out.dump(), "application/json");
    });
    port = server.bind_to_any_port("127.0.0.1");
    thread = std::thread([this] { server.listen_after_bind(); });
    server.wait_until_ready();
  }
  ~MockServer() {
    server.stop();
    thread.join();
  }
  [[nodiscard]] std::string endpoint() const { return "http://127.0.0.1:" + std::to_string(port); }
};

}  // namespace

TEST_CASE("prompt rendering examples") {
  CHECK(data::build_prompt({"hamster", 26, std::nullopt, 0}) == "photo of a small hamster.");
  CHECK(data::build_prompt({"hamster", 0, std::string("<imnet>"), 0}) == "photo of a hamster. in the style of <imnet>");
  const data::PromptSpec spec{"tabby cat", 9, std::nullopt, 5};
  CHECK(data::build_prompt(spec) == data::build_prompt(spec));
  CHECK_THROWS_AS(data::build_prompt({"", 0, std::nullopt, 0}), ContractError);
  CHECK_THROWS_AS(data::build_prompt({"cat", 27, std::nullopt, 0}), ContractError);
}

TEST_CASE("prompt round-trip recovers template and class uniquely") {
  const auto names = data::default_class_names();
  for (std::size_t t = 0; t < data::kPromptTemplates.size(); ++t) {
    for (const auto& name : names) {
      for (const auto& style : {std::optional<std::string>{}, std::optional<std::string>{"<imnet>"}}) {
        const std::string text = data::build_prompt({name, t, style, 0});
        std::size_t count = 0;
        for (auto pos = text.find(name); pos != std::string::npos; pos = text.find(name, pos + 1)) ++count;
        CHECK(count == 1);
        const auto parsed = data::parse_prompt(text, names);
        REQUIRE(parsed.size() == 1);
        CHECK(parsed[0].template_index == t);
        CHECK(parsed[0].class_name == name);
        CHECK(parsed[0].style_token == style);
      }
    }
  }
}

TEST_CASE("template sampling is seeded and uniform") {
  CHECK(data::sample_prompt("cat", 42).template_index == data::sample_prompt("cat", 42).template_index);
  std::array<int, 27> counts{};
  for (std::uint64_t seed = 0; seed < 27000; ++seed) {
    ++counts[data::sample_prompt("cat", seed).template_index];
  }
  for (const int c : counts) {
    CHECK(c >= 800);
    CHECK(c <= 1200);
  }
}

TEST_CASE("synthetic images are deterministic, bounded and consistent across generators") {
  const Dataset a = data::synth_images(3, 6, 17);
  const Dataset b = data::synth_images(3, 6, 17);
  CHECK(a.images == b.images);
  CHECK(a.labels == std::vector<int>(6, 3));
  CHECK(a.images.shape() == nn::Shape{6, 3, 32, 32});
  CHECK(a.images.vector().minCoeff() >= 0.0F);
  CHECK(a.images.vector().maxCoeff() <= 1.0F);
  CHECK(data::synth_images(3, 6, 18).images != a.images);

  const Dataset tail = data::synth_images(3, 2, 17, 4);
  CHECK(tail.images == a.images.slice(4, 2));

  const Dataset mixed = data::synth_balanced(60, 17);
  for (nn::Index i = 0; i < 6; ++i) {
    CHECK(mixed.labels[static_cast<std::size_t>(10 * i + 3)] == 3);
    CHECK(mixed.images.slice(10 * i + 3, 1) == a.images.slice(i, 1));
  }
  CHECK_THROWS_AS(data::synth_images(10, 1, 0), ContractError);
  CHECK_THROWS_AS(data::synth_images(0, 0, 0), ContractError);
}

TEST_CASE("classes are linearly separable from raw pixels") {
  // Multinomial logistic regression on centred pixels, full-batch gradient descent.
  constexpr int n = 2000;
  constexpr int m = 500;
  const Dataset train = data::synth_balanced(n, 5);
  const Dataset test = data::synth_balanced(m, 6);
  Eigen::MatrixXd x = train.images.matrix(n, 3072).cast<double>();
  Eigen::MatrixXd xt = test.images.matrix(m, 3072).cast<double>();
  const Eigen::RowVectorXd mu = x.colwise().mean();
  x.rowwise() -= mu;
  xt.rowwise() -= mu;
  Eigen::MatrixXd w = Eigen::MatrixXd::Zero(3072, 10);
  Eigen::RowVectorXd b = Eigen::RowVectorXd::Zero(10);
  Eigen::MatrixXd onehot = Eigen::MatrixXd::Zero(n, 10);
  for (int i = 0; i < n; ++i) onehot(i, train.labels[static_cast<std::size_t>(i)]) = 1.0;
  for (int it = 0; it < 300; ++it) {
    Eigen::MatrixXd p = (x * w).rowwise() + b;
    for (int i = 0; i < n; ++i) {
      p.row(i) = (p.row(i).array() - p.row(i).maxCoeff()).exp();
      p.row(i) /= p.row(i).sum();
    }
    const Eigen::MatrixXd g = (p - onehot) / n;
    w -= (0.5 / 30.0) * (x.transpose() * g);
    b -= 0.5 * g.colwise().sum();
  }
  const Eigen::MatrixXd scores = (xt * w).rowwise() + b;
  int correct = 0;
  for (int i = 0; i < m; ++i) {
    Eigen::Index arg = 0;
    scores.row(i).maxCoeff(&arg);
    correct += static_cast<int>(arg) == test.labels[static_cast<std::size_t>(i)];
  }
  CHECK(correct / static_cast<double>(m) >= 0.8);
}

TEST_CASE("corruption") {
  const Dataset clean = data::synth_balanced(20, 3);
  CHECK_THROWS_AS(data::corrupt(clean, 0, 1), ContractError);
  CHECK_THROWS_AS(data::corrupt(clean, 6, 1), ContractError);
  for (int severity = 1; severity <= 5; ++severity) {
    const Dataset c = data::corrupt(clean, severity, 9);
    CHECK(c.labels == clean.labels);
    CHECK(c.images == data::corrupt(clean, severity, 9).images);
    CHECK(c.images.vector().minCoeff() >= 0.0F);
    CHECK(c.images.vector().maxCoeff() <= 1.0F);
    for (nn::Index i = 0; i < clean.size(); ++i) {
      const TensorF d = c.images.slice(i, 1);
      const TensorF o = clean.images.slice(i, 1);
      CHECK((d.vector() - o.vector()).norm() > 0.0F);
    }
  }
}

TEST_CASE("dataset file round-trip and corruption") {
  const Dataset d = data::synth_balanced(12, 4);
  const std::string path = temp_path("set.gqd");
  data::save_dataset(d, path);
  const Dataset back = data::load_dataset(path);
  CHECK(back.images == d.images);
  CHECK(back.labels == d.labels);
  std::filesystem::remove(path);

  const std::string bytes = data::encode_dataset(d);
  CHECK_THROWS_AS(data::decode_dataset(bytes.substr(0, bytes.size() - 1)), FormatError);
  CHECK_THROWS_AS(data::decode_dataset(bytes.substr(0, 10)), FormatError);
  CHECK_THROWS_AS(data::decode_dataset("GQD2" + bytes.substr(4)), FormatError);
  CHECK_THROWS_AS(data::decode_dataset(bytes + "x"), FormatError);
}

TEST_CASE("dataset byte layout is little-endian") {
  using namespace std::string_literals;
  const std::string fixture = "GQD1"s + "\x01\x00\x00\x00"s + "\x03"s + "\x01\x00"s + "\x01\x00"s + "\x07\x00"s +
                              "\x00\x00\x80\x3f"s + "\x00\x00\x00\x3f"s + "\x00\x00\x00\xc0"s;
  const Dataset d = data::decode_dataset(fixture);
  CHECK(d.labels == std::vector<int>{7});
  CHECK(d.images.shape() == nn::Shape{1, 3, 1, 1});
  CHECK(d.images.values() == std::vector<float>{1.0F, 0.5F, -2.0F});
  CHECK(data::encode_dataset(d) == fixture);
}

TEST_CASE("area resize averages blocks") {
  TensorF img({1, 4, 6});
  for (nn::Index i = 0; i < img.size(); ++i) img[i] = static_cast<float>(i);
  const TensorF half = data::resize_area(img, 2, 3);
  for (nn::Index y = 0; y < 2; ++y) {
    for (nn::Index x = 0; x < 3; ++x) {
      const float expect = (img.at(0, 2 * y, 2 * x) + img.at(0, 2 * y, 2 * x + 1) + img.at(0, 2 * y + 1, 2 * x) +
                            img.at(0, 2 * y + 1, 2 * x + 1)) /
                           4.0F;
      CHECK(half.at(0, y, x) == doctest::Approx(expect).epsilon(1e-6));
    }
  }
  const TensorF same = data::resize_area(img, 4, 6);
  CHECK(same == img);
  const TensorF odd = data::resize_area(img, 3, 4);
  CHECK(odd.vector().mean() == doctest::Approx(img.vector().mean()).epsilon(1e-6));
}

TEST_CASE("external generation against a mock server") {
  MockServer mock;
  data::ExternalOptions opts{mock.endpoint(), 4, 10.0};

  SUBCASE("fixture round-trip and default guidance") {
    data::GenRequest req;
    req.prompt = "photo of a red circle.";
    req.seed = 3;
    const TensorF img = data::generate_external(req, opts);
    REQUIRE(img.shape() == nn::Shape{3, 32, 32});
    for (int c = 0; c < 3; ++c) {
      for (int y = 0; y < 32; ++y) {
        for (int x = 0; x < 32; ++x) {
          const float expect = (fixture_pixel(3, 2 * y, 2 * x, c) + fixture_pixel(3, 2 * y, 2 * x + 1, c) +
                                fixture_pixel(3, 2 * y + 1, 2 * x, c) + fixture_pixel(3, 2 * y + 1, 2 * x + 1, c)) /
                               4.0F;
          CHECK(img.at(c, y, x) == expect);
        }
      }
    }
    REQUIRE(mock.requests.size() == 1);
    CHECK(mock.requests[0]["guidance_scale"].get<double>() == 3.5);
    CHECK(mock.requests[0]["prompt"] == req.prompt);
    CHECK(mock.requests[0]["seed"].get<std::uint64_t>() == 3);
    CHECK(mock.requests[0]["steps"].get<int>() > 0);
  }

  SUBCASE("native resolution passes through") {
    mock.side = 32;
    const TensorF img = data::generate_external({"p", 8, 3.5, 10}, opts);
    CHECK(img.at(1, 5, 9) == fixture_pixel(8, 5, 9, 1));
  }

  SUBCASE("server errors carry the request id") {
    const data::GenRequest bad{"p", 404, 3.5, 10};
    const std::string id = data::request_id(bad);
    try {
      (void)data::generate_external(bad, opts);
      FAIL("expected TransportError");
    } catch (const TransportError& e) {
      CHECK(std::string(e.what()).find(id) != std::string::npos);
    }
    CHECK_THROWS_AS(data::generate_external({"p", 405, 3.5, 10}, opts), TransportError);
  }

  SUBCASE("bounded parallel fan-out keeps request order") {
    std::vector<data::GenRequest> reqs;
    std::vector<int> labels;
    for (int i = 0; i < 9; ++i) {
      reqs.push_back({"p", static_cast<std::uint64_t>(i), 3.5, 10});
      labels.push_back(i % 10);
    }
    const Dataset d = data::generate_many(reqs, labels, opts);
    CHECK(d.provenance == data::Provenance::external);
    for (int i = 0; i < 9; ++i) {
      CHECK(d.images.at(i, 0, 0, 0) == data::generate_external(reqs[static_cast<std::size_t>(i)], opts).at(0, 0, 0));
    }
  }
}

TEST_CASE("unreachable endpoint and endpoint override") {
  const data::ExternalOptions opts{"http://127.0.0.1:1", 1, 2.0};
  CHECK_THROWS_AS(data::generate_external({"p", 1, 3.5, 10}, opts), TransportError);
  CHECK_THROWS_AS(data::generate_external({"p", 1, 3.5, 10}, data::ExternalOptions{}), TransportError);
  CHECK_THROWS_AS(data::request_body({"p", 1, 0.0, 10}), ContractError);

  ::unsetenv("GENQ_ENDPOINT");
  CHECK(data::resolve_endpoint("http://a:1") == "http://a:1");
  ::setenv("GENQ_ENDPOINT", "http://b:2", 1);
  CHECK(data::resolve_endpoint("http://a:1") == "http://b:2");
  ::unsetenv("GENQ_ENDPOINT");
}

#include <catch2/catch_amalgamated.hpp>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "metr/labelspace.hpp"

using namespace metr;

TEST_CASE("name normalization") {
  CHECK(normalize_name("  Person ") == "person");
  CHECK(normalize_name("Traffic   Light") == "traffic light");
  CHECK(normalize_name("CAR") == "car");
}

TEST_CASE("register_dataset shares identical names and separates synonyms") {
  LabelSpace space;
  const auto d0 = space.register_dataset("d0", {"person", "car"});
  const auto d1 = space.register_dataset("d1", {"person", "truck"});
  CHECK(space.size() == 3);
  CHECK(d0.local_to_global[0] == d1.local_to_global[0]);  // "person" shared
  CHECK(space.entries()[d0.local_to_global[0]].source_datasets == std::set<int>{0, 1});

  // synonyms stay distinct entries
  LabelSpace sports;
  sports.register_dataset("a", {"football"});
  sports.register_dataset("b", {"soccer"});
  CHECK(sports.size() == 2);
  CHECK(sports.find("football") != sports.find("soccer"));
}

TEST_CASE("disjoint taxonomies sum their sizes") {
  LabelSpace space;
  space.register_dataset("a", {"a1", "a2", "a3"});
  space.register_dataset("b", {"b1", "b2"});
  space.register_dataset("c", {"c1"});
  CHECK(space.size() == 6);
  // ids are dense 0..K-1
  for (int i = 0; i < space.size(); ++i) CHECK(space.entries()[i].global_id == i);
}

TEST_CASE("registration errors") {
  LabelSpace space;
  CHECK_THROWS_AS(space.register_dataset("d", {}), ConfigError);
  CHECK_THROWS_AS(space.register_dataset("d", {"person", "Person"}), ConfigError);
  CHECK_THROWS_AS(space.register_dataset("d", {"ok", "  "}), ConfigError);
}

TEST_CASE("registration order does not change the name-embedding mapping") {
  const uint64_t seed = 99;
  LabelSpace forward, reverse;
  forward.register_dataset("a", {"cat", "dog"});
  forward.register_dataset("b", {"bird", "dog"});
  reverse.register_dataset("b", {"bird", "dog"});
  reverse.register_dataset("a", {"cat", "dog"});
  CHECK(forward.size() == reverse.size());
  for (const auto& entry : forward.entries()) {
    const auto other = reverse.find(entry.name);
    REQUIRE(other.has_value());
    CHECK(synth_embedding(entry.name, 8, seed) == synth_embedding(reverse.name_of(*other), 8, seed));
  }
}

TEST_CASE("synth_embedding determinism and norm") {
  const Vec a = synth_embedding("person", 16, 7);
  const Vec b = synth_embedding("person", 16, 7);
  CHECK(a == b);
  CHECK(std::fabs(norm2(a) - 1.0) < 1e-12);
  // different name or seed moves the vector
  CHECK(synth_embedding("car", 16, 7) != a);
  CHECK(synth_embedding("person", 16, 8) != a);
  CHECK_THROWS_AS(synth_embedding("x", 1, 7), ConfigError);
}

TEST_CASE("force_cosine hits the requested similarity") {
  const Vec a = synth_embedding("football", 16, 3);
  const Vec b = synth_embedding("soccer", 16, 3);
  const Vec forced = force_cosine(a, b, 0.97);
  CHECK(std::fabs(norm2(forced) - 1.0) < 1e-12);
  CHECK(cosine(a, forced) == Catch::Approx(0.97).margin(1e-12));
  CHECK(cosine(a, forced) >= 0.95);
}

TEST_CASE("embedding file round-trips bit-exactly") {
  LabelSpace space;
  space.register_dataset("d0", {"person", "traffic light", "car"});
  EmbeddingTable table;
  table.k = space.size();
  table.d = 16;
  table.rows = Mat(table.k, table.d);
  Rng rng(5);
  for (double& v : table.rows.a) v = rng.normal();

  std::vector<std::string> names;
  for (const auto& e : space.entries()) names.push_back(e.name);
  const std::string path = "/tmp/metr_test_embeddings.txt";
  save_embeddings(path, names, table);
  const EmbeddingTable loaded = load_embeddings(path, space);
  CHECK(loaded.k == table.k);
  CHECK(loaded.d == 16);
  CHECK(loaded.rows.a == table.rows.a);  // bit-exact

  // second save reproduces the identical file
  const std::string path2 = "/tmp/metr_test_embeddings2.txt";
  save_embeddings(path2, names, loaded);
  std::ifstream f1(path), f2(path2);
  std::string s1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  std::string s2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  CHECK(s1 == s2);
  std::filesystem::remove(path);
  std::filesystem::remove(path2);
}

TEST_CASE("load_embeddings failure modes") {
  LabelSpace space;
  space.register_dataset("d0", {"person", "car"});
  const std::string path = "/tmp/metr_test_missing.txt";
  {
    std::ofstream out(path);
    out << "1 4\n";
    out << "person 0.1 0.2 0.3 0.4\n";
  }
  CHECK_THROWS_WITH(load_embeddings(path, space), "embedding missing for category: car");
  {
    std::ofstream out(path);
    out << "2 4\n";
    out << "person 0.1 0.2 0.3 0.4\n";
    out << "car 0.1 0.2\n";  // short row
  }
  CHECK_THROWS_AS(load_embeddings(path, space), ShapeError);
  CHECK_THROWS_AS(load_embeddings("/tmp/does_not_exist_metr.txt", space), ConfigError);
  std::filesystem::remove(path);
}

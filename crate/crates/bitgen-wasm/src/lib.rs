pub fn placeholder_until_demo_is_written() {}
